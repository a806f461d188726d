import numpy as np
import pytest

from mvlevy.models import BBParams, LSParams, ModelSpec, NIGMarginal, VGMarginal

# Representative margins: a short-dated equity-like VG and a mid-range NIG.
VG_REP = VGMarginal(-0.15, 0.25, 1.6)
NIG_REP = NIGMarginal(-4.0, 0.17, 5.8)
RHO = np.array([[1.0, 0.5], [0.5, 1.0]])


def exact_cbb_vg(sys=VGMarginal(-0.1, 0.15, 1.6), loadings=(1.0, 1.2), kappas=(0.8, 0.9)):
    """Constrained BB-VG whose target margins satisfy the convolution conditions exactly."""
    targets = [VGMarginal(sys.kappa * b * sys.mu / k, abs(b) * sys.sigma * np.sqrt(sys.kappa / k), k)
               for b, k in zip(loadings, kappas)]
    return ModelSpec(BBParams.from_targets(targets, sys, loadings, "cVG"))


def exact_cbb_nig(sys=NIGMarginal(-2.0, 0.1, 3.0), loadings=(0.5, 0.6), deltas=(0.17, 0.2)):
    targets = [NIGMarginal(sys.beta / b, d, sys.gamma / b) for b, d in zip(loadings, deltas)]
    return ModelSpec(BBParams.from_targets(targets, sys, loadings, "cNIG"))


def variant_models() -> dict:
    vg2 = VGMarginal(-0.1, 0.2, 1.2)
    nig2 = NIGMarginal(-3.0, 0.2, 5.0)
    return {
        "cLS-VG": ModelSpec(LSParams([VG_REP, vg2], 0.5, RHO, "cVG")),
        "uLS-VG": ModelSpec(LSParams([VG_REP, vg2], 0.4, RHO, "uVG", alphas=(0.3, 0.5))),
        "cLS-NIG": ModelSpec(LSParams([NIG_REP, nig2], 0.5, RHO, "cNIG")),
        "uLS-NIG": ModelSpec(LSParams([NIG_REP, nig2], 0.6, RHO, "uNIG", alphas=(0.5, 0.7))),
        "cBB-VG": exact_cbb_vg(),
        "uBB-VG": ModelSpec(BBParams([VG_REP, vg2], VGMarginal(-0.1, 0.15, 1.2), (0.8, 1.0), "uVG")),
        "cBB-NIG": exact_cbb_nig(),
        "uBB-NIG": ModelSpec(BBParams([NIG_REP, nig2], NIGMarginal(-2.0, 0.1, 3.0), (0.5, 0.6), "uNIG")),
    }


VARIANT_NAMES = list(variant_models())


@pytest.fixture(params=VARIANT_NAMES)
def variant_model(request):
    return request.param, variant_models()[request.param]


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running Monte Carlo or calibration checks")


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary
# ---------------------------------------------------------------------------

ACCEPTANCE: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    """Log one check towards a criterion; a criterion passes when all its checks pass."""
    ACCEPTANCE.setdefault(number, []).append((bool(ok), detail))
    print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[n]
        failed = [d for ok, d in checks if not ok]
        status = "FAIL" if failed else "PASS"
        detail = failed[0] if failed else f"{len(checks)} check(s)"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")


def corr_with_stderr(x, y):
    """Sample correlation and its influence-function standard error (valid for heavy tails)."""
    x = (x - x.mean()) / x.std()
    y = (y - y.mean()) / y.std()
    r = float(np.mean(x * y))
    infl = x * y - 0.5 * r * (x * x + y * y)
    return r, float(infl.std() / np.sqrt(x.size))
