"""Risk-neutral calibration of the eight model variants.

Procedures
----------
* ``fit_marginal``: one VG or NIG margin to one implied-vol surface.
* ``fit_dependence_ls``: ``(a, rho)`` of a constrained LS model given margins.
* ``fit_dependence_bb_penalized`` / ``fit_dependence_bb_constrained``:
  systematic factor and loadings of a constrained BB model given margins,
  trading correlation fit against the convolution residuals.
* ``fit_joint``: all parameters at once, subject to correlation gaps < epsilon.
* ``calibrate``: the escalation ladder used by the command line.

Model correlations are always the closed-form theoretical ones.  Points
outside the parameter domain (including an undefined martingale correction)
score ``SENTINEL + violation`` so the search landscape stays finite.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import LevyModelError
from .models import (
    DEFAULT_BOUNDS,
    BBParams,
    LSParams,
    ModelSpec,
    NIGMarginal,
    VGMarginal,
    bb_residuals,
    derive_idiosyncratic,
    marginal_exponent,
    model_to_dict,
    theoretical_correlation,
    validate_domain,
)
from .optimize import BUDGET_EXHAUSTED, CONVERGED, INFEASIBLE, DESettings, OptimResult, differential_evolution
from .vanilla import CosSettings, VolSurface, exponent_implied_vols

SENTINEL = 1e6
TRADEOFF_FLAG = "trade-off bound reached"
_EDGE = 1e-9  # relative margin kept from open bounds

CALIBRATION_BOUNDS = dict(DEFAULT_BOUNDS, a=(1e-3, 5.0), alpha=(1e-3, 5.0), b=(0.01, 5.0))
MODEL_NAMES = ("cLS-VG", "uLS-VG", "cLS-NIG", "uLS-NIG", "cBB-VG", "uBB-VG", "cBB-NIG", "uBB-NIG")


def parse_model_name(name: str) -> tuple[str, str]:
    """``"cls-vg"`` -> ``("LS", "cVG")``."""
    for full in MODEL_NAMES:
        if name.replace("_", "-").lower() == full.lower():
            return full[1:3], full[0] + full[4:]
    raise ValueError(f"unknown model {name!r}; expected one of {', '.join(MODEL_NAMES)}")


# ---------------------------------------------------------------------------
# configuration and data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationConfig:
    epsilon: float = 0.1
    h: float = 1.0
    bb_epsilon: float = 0.01
    escalation: tuple = (0.1, 0.2)
    bounds: dict = field(default_factory=lambda: dict(CALIBRATION_BOUNDS))
    de: DESettings = DESettings()
    cos: CosSettings = CosSettings()
    tradeoff_tol: float = 1e-6

    def __post_init__(self):
        if not self.epsilon > 0 or not self.bb_epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.h < 0:
            raise ValueError("h must be non-negative")
        merged = dict(CALIBRATION_BOUNDS)
        merged.update({k: tuple(map(float, v)) for k, v in self.bounds.items()})
        for k, (lo, hi) in merged.items():
            if not lo < hi:
                raise ValueError(f"bounds for {k} must satisfy lower < upper")
        for k in ("sigma", "kappa", "delta", "gamma", "a", "alpha", "b"):
            if merged[k][0] <= 0:
                raise ValueError(f"lower bound for {k} must be positive")
        object.__setattr__(self, "bounds", merged)
        object.__setattr__(self, "escalation", tuple(float(e) for e in self.escalation))

    def with_seed(self, seed: int) -> "CalibrationConfig":
        return replace(self, de=replace(self.de, seed=int(seed)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = {k: list(v) for k, v in self.bounds.items()}
        d["de"]["mutation"] = list(self.de.mutation)
        d["escalation"] = list(self.escalation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationConfig":
        known = {"epsilon", "h", "bb_epsilon", "escalation", "bounds", "de", "cos", "tradeoff_tol"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        kw = {k: v for k, v in d.items() if k in known}
        if "de" in kw:
            de = dict(kw["de"])
            if "mutation" in de:
                m = de["mutation"]
                de["mutation"] = tuple(m) if isinstance(m, (list, tuple)) else (float(m), float(m))
            kw["de"] = DESettings(**de)
        if "cos" in kw:
            kw["cos"] = CosSettings(**kw["cos"])
        if "escalation" in kw:
            kw["escalation"] = tuple(kw["escalation"])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "CalibrationConfig":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{exc.lineno}: {exc.msg}") from None
        return cls.from_dict(d)


@dataclass(frozen=True)
class MarketCorrelations:
    """Pairwise targets ``rho_mkt(i, j)`` for ``i < j``."""

    n_assets: int
    pairs: dict

    def __post_init__(self):
        clean = {}
        for (i, j), v in self.pairs.items():
            i, j = sorted((int(i), int(j)))
            if i == j or not 0 <= i < j < self.n_assets:
                raise ValueError(f"bad asset pair ({i}, {j})")
            if not -1.0 <= float(v) <= 1.0:
                raise ValueError(f"correlation target for ({i}, {j}) outside [-1, 1]")
            clean[(i, j)] = float(v)
        if not clean:
            raise ValueError("at least one correlation target is required")
        object.__setattr__(self, "pairs", dict(sorted(clean.items())))

    @classmethod
    def from_matrix(cls, m) -> "MarketCorrelations":
        m = np.asarray(m, dtype=float)
        n = m.shape[0]
        return cls(n, {(i, j): m[i, j] for i in range(n) for j in range(i + 1, n)})

    def keys(self):
        return list(self.pairs)

    def values(self) -> np.ndarray:
        return np.array(list(self.pairs.values()))

    def to_dict(self) -> dict:
        return {"n_assets": self.n_assets, "pairs": [{"i": i, "j": j, "rho": v} for (i, j), v in self.pairs.items()]}

    @classmethod
    def from_dict(cls, d: dict) -> "MarketCorrelations":
        if "matrix" in d:
            return cls.from_matrix(d["matrix"])
        return cls(int(d["n_assets"]), {(int(p["i"]), int(p["j"])): float(p["rho"]) for p in d["pairs"]})

    @classmethod
    def load(cls, path) -> "MarketCorrelations":
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{exc.lineno}: {exc.msg}") from None
            except (KeyError, TypeError) as exc:
                raise ValueError(f"{path}: malformed correlation file ({exc})") from None


@dataclass
class CalibrationResult:
    model: ModelSpec
    procedure: str
    status: str
    marginal_rmse: tuple
    correlation_rmse: float
    correlation_gaps: dict
    residual_norms: Optional[tuple] = None
    flags: list = field(default_factory=list)
    epsilon: Optional[float] = None
    stages: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def max_gap(self) -> float:
        return max(abs(g) for g in self.correlation_gaps.values())

    def diagnostics(self) -> dict:
        return {
            "procedure": self.procedure,
            "status": self.status,
            "marginal_rmse": list(self.marginal_rmse),
            "correlation_rmse": self.correlation_rmse,
            "correlation_gaps": [{"i": i, "j": j, "gap": g} for (i, j), g in self.correlation_gaps.items()],
            "residual_norms": list(self.residual_norms) if self.residual_norms is not None else None,
            "flags": list(self.flags),
            "epsilon": self.epsilon,
            "stages": [{"name": name, "status": r.status, "generations": r.generations, "nfev": r.nfev,
                        "best": r.fun, "trace": r.trace} for name, r in self.stages],
            "wall_time": self.wall_time,
        }

    def to_dict(self) -> dict:
        return {"model": model_to_dict(self.model), "diagnostics": self.diagnostics()}


# ---------------------------------------------------------------------------
# marginal objective
# ---------------------------------------------------------------------------


def _mgf_gap(m, scale: float = 1.0) -> float:
    """``<= 0`` iff ``E[exp(scale * X(1))]`` is finite for margin ``m`` (with a small safety margin)."""
    if isinstance(m, VGMarginal):
        return scale * m.mu * m.kappa + 0.5 * scale ** 2 * m.sigma ** 2 * m.kappa - 1.0 + 1e-9
    return abs(m.beta + scale) - m.gamma + 1e-9


def _margin_gaps(m) -> list:
    if isinstance(m, NIGMarginal):
        return [abs(m.beta) - m.gamma + 1e-9]
    return []


def _martingale_gaps(model: ModelSpec) -> list:
    p = model.params
    if isinstance(p, LSParams):
        return [_mgf_gap(m) for m in p.marginals]
    return [_mgf_gap(x) for x in p.idio] + [_mgf_gap(p.sys, b) for b in p.loadings]


def vol_rmse(model_vols, surface: VolSurface) -> float:
    """Weighted root-mean-square vol error, ``sqrt(sum w d^2 / sum w)``."""
    d = np.asarray(model_vols) - surface.vols
    return float(np.sqrt(np.sum(surface.weights * d * d) / np.sum(surface.weights)))


def _exponent_and_g(target, asset: int):
    if isinstance(target, ModelSpec):
        exponent = lambda u: marginal_exponent(target, asset, u)  # noqa: E731
    else:
        exponent = target.exponent
    return exponent, float(-np.real(exponent(-1j)))


def marginal_objective(target, surface: VolSurface, asset: int = 0,
                       cos: Optional[CosSettings] = None) -> float:
    """``(1/N) sum_l w_l (v_mod - v_mkt)^2`` over the quotes of ``surface``.

    ``target`` is either a VG/NIG margin or a ModelSpec (with ``asset``
    selecting the margin).  Out-of-domain inputs score ``SENTINEL`` plus the
    total constraint violation.
    """
    if isinstance(target, ModelSpec):
        viol = sum(max(v, 0.0) for v in _martingale_gaps(target))
        bad = validate_domain(target)
    else:
        viol = max(_mgf_gap(target), 0.0) + sum(max(v, 0.0) for v in _margin_gaps(target))
        bad = target.violations()
    if bad or viol > 0:
        return SENTINEL + viol + len(bad)
    try:
        exponent, g = _exponent_and_g(target, asset)
        vols = exponent_implied_vols(exponent, g, surface, cos, on_error="clip")
    except (LevyModelError, FloatingPointError):
        return SENTINEL
    if not np.all(np.isfinite(vols)):
        return SENTINEL
    d = vols - surface.vols
    return float(np.sum(surface.weights * d * d) / surface.n_quotes)


def model_vols(target, surface: VolSurface, asset: int = 0, cos: Optional[CosSettings] = None) -> np.ndarray:
    exponent, g = _exponent_and_g(target, asset)
    return exponent_implied_vols(exponent, g, surface, cos, on_error="clip")


# ---------------------------------------------------------------------------
# parameter blocks
# ---------------------------------------------------------------------------

_LAW_FIELDS = {"VG": ("mu", "sigma", "kappa"), "NIG": ("beta", "delta", "gamma")}


def _law(variant: str) -> str:
    return "VG" if variant.endswith("VG") and not variant.endswith("NIG") else "NIG"


def _margin(law: str, x) -> object:
    return VGMarginal(*map(float, x)) if law == "VG" else NIGMarginal(*map(float, x))


def _margin_bounds(law: str, cfg: CalibrationConfig) -> list:
    return [cfg.bounds[f] for f in _LAW_FIELDS[law]]


def _pairs(n: int) -> list:
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def _rho_from(vals, n: int) -> np.ndarray:
    rho = np.eye(n)
    for (i, j), v in zip(_pairs(n), vals):
        rho[i, j] = rho[j, i] = v
    return rho


def _psd_gap(rho: np.ndarray) -> list:
    if rho.shape[0] < 3:
        return []
    return [-float(np.linalg.eigvalsh(rho).min())]


def _gaps(model: ModelSpec, targets: MarketCorrelations) -> dict:
    return {(i, j): theoretical_correlation(model, i, j) - v for (i, j), v in targets.pairs.items()}


def _corr_rmse(gaps: dict) -> float:
    return float(np.sqrt(np.mean(np.square(list(gaps.values())))))


def _stage_status(results) -> str:
    statuses = [r.status for r in results]
    if INFEASIBLE in statuses:
        return INFEASIBLE
    if BUDGET_EXHAUSTED in statuses:
        return BUDGET_EXHAUSTED
    return CONVERGED


# ---------------------------------------------------------------------------
# two-step stage 1
# ---------------------------------------------------------------------------


@dataclass
class MarginalFit:
    marginal: object
    rmse: float
    optim: OptimResult

    def __iter__(self):
        return iter((self.marginal, self.rmse))


def fit_marginal(surface: VolSurface, law: str, config: Optional[CalibrationConfig] = None) -> MarginalFit:
    """Best VG or NIG margin for one surface; ``law`` may also be a variant tag."""
    cfg = config or CalibrationConfig()
    law = law if law in ("VG", "NIG") else _law(law)
    if np.count_nonzero(surface.weights > 0) < 3:
        raise ValueError("at least three quotes with positive weight are needed")

    def constraints(x):
        m = _margin(law, x)
        return [_mgf_gap(m)] + _margin_gaps(m)

    res = differential_evolution(lambda x: marginal_objective(_margin(law, x), surface, cos=cfg.cos),
                                 _margin_bounds(law, cfg), constraints, cfg.de)
    m = _margin(law, res.x)
    rmse = vol_rmse(model_vols(m, surface, cos=cfg.cos), surface) if res.feasible else float("inf")
    return MarginalFit(m, rmse, res)


# ---------------------------------------------------------------------------
# LS dependence
# ---------------------------------------------------------------------------


@dataclass
class DependenceFit:
    model: ModelSpec
    correlation_rmse: float
    gaps: dict
    optim: OptimResult
    flags: list = field(default_factory=list)
    residual_norms: Optional[tuple] = None
    report: str = ""


def _a_max(margs, law: str) -> float:
    kappa = np.array([m.subordinated()[2] for m in margs])
    return float(np.min(kappa ** (-1.0 if law == "VG" else -0.5)))


def fit_dependence_ls(marginals: Sequence, targets: MarketCorrelations, variant: str,
                      config: Optional[CalibrationConfig] = None) -> DependenceFit:
    """Fit ``(a, rho_ij)`` of a constrained LS model to correlation targets.

    The objective is the mean squared correlation gap.  When the best fit
    leaves a gap and sits on the boundary of the feasible region (``a`` at
    its upper bound or some ``|rho_ij| = 1``) the result carries
    ``TRADEOFF_FLAG``.
    """
    cfg = config or CalibrationConfig()
    if variant not in ("cVG", "cNIG"):
        raise ValueError("two-step dependence calibration applies to constrained LS variants (cVG, cNIG)")
    margs = tuple(marginals)
    n = len(margs)
    if targets.n_assets != n:
        raise ValueError("targets and marginals differ in dimension")
    law = _law(variant)
    a_hi = _a_max(margs, law) * (1.0 - _EDGE)
    bounds = [(a_hi * 1e-6, a_hi)] + [(-1.0, 1.0)] * (n * (n - 1) // 2)
    keys, tv = targets.keys(), targets.values()

    # theoretical correlation is a * (c0 + rho_ij c1): probe the two coefficients once
    probe_a = 0.5 * a_hi
    c0 = correlation_probe(margs, variant, probe_a, np.eye(n)) / probe_a
    c1 = correlation_probe(margs, variant, probe_a, np.ones((n, n))) / probe_a - c0
    ii = np.array([k[0] for k in keys])
    jj = np.array([k[1] for k in keys])

    def model_corr(x):
        rho = _rho_from(x[1:], n)
        return x[0] * (c0[ii, jj] + rho[ii, jj] * c1[ii, jj])

    def objective(x):
        return float(np.mean((model_corr(x) - tv) ** 2))

    res = differential_evolution(objective, bounds, (lambda x: _psd_gap(_rho_from(x[1:], n))) if n > 2 else None,
                                 cfg.de)
    model = ModelSpec(LSParams(margs, float(res.x[0]), _rho_from(res.x[1:], n), variant))
    gaps = _gaps(model, targets)
    rmse = _corr_rmse(gaps)
    flags = []
    on_edge = res.x[0] >= a_hi * (1 - 1e-6) or np.any(np.abs(res.x[1:]) >= 1 - 1e-6)
    if rmse > cfg.tradeoff_tol and on_edge:
        flags.append(TRADEOFF_FLAG)
    return DependenceFit(model, rmse, gaps, res, flags)


def correlation_probe(margs, variant: str, a: float, rho: np.ndarray) -> np.ndarray:
    """Matrix of theoretical correlations of a constrained LS model."""
    model = ModelSpec(LSParams(margs, a, rho, variant))
    n = len(margs)
    out = np.eye(n)
    for i, j in _pairs(n):
        out[i, j] = out[j, i] = theoretical_correlation(model, i, j)
    return out


# ---------------------------------------------------------------------------
# BB dependence
# ---------------------------------------------------------------------------


def _bb_inequalities(targets, sys, loadings) -> list:
    out = []
    for t, b in zip(targets, loadings):
        if isinstance(t, VGMarginal):
            out.append(b * b * sys.sigma ** 2 - t.sigma ** 2 + 1e-12)
            out.append(t.kappa - sys.kappa + 1e-9)
        else:
            out.append(b * sys.delta - t.delta + 1e-12)
    return out


def _bb_model(targets, sys, loadings, variant) -> ModelSpec:
    return ModelSpec(BBParams.from_targets(targets, sys, loadings, variant))


def _bb_dependence(targets: Sequence, corr: MarketCorrelations, variant: str, cfg: CalibrationConfig,
                   mode: str, epsilon: Optional[float] = None) -> DependenceFit:
    if variant not in ("cVG", "cNIG"):
        raise ValueError("BB dependence calibration applies to constrained BB variants (cVG, cNIG)")
    targets = tuple(targets)
    n = len(targets)
    if corr.n_assets != n:
        raise ValueError("targets and correlations differ in dimension")
    law = _law(variant)
    bounds = [cfg.bounds["b"]] * n + _margin_bounds(law, cfg)
    keys, tv = corr.keys(), corr.values()
    var = np.array([t.variance() for t in targets])

    def split(x):
        return x[:n], _margin(law, x[n:])

    def corr_gaps(b, sys):
        vz = sys.variance()
        return np.array([b[i] * b[j] * vz / math.sqrt(var[i] * var[j]) for i, j in keys]) - tv

    def domain_gaps(b, sys):
        return _bb_inequalities(targets, sys, b) + _margin_gaps(sys) + [_mgf_gap(sys, bj) for bj in b]

    def residual_sq(b, sys):
        return float(np.sum(bb_residuals(targets, sys, b) ** 2))

    if mode == "penalized":
        def objective(x):
            b, sys = split(x)
            return float(np.mean(corr_gaps(b, sys) ** 2)) + cfg.h * residual_sq(b, sys)

        def constraints(x):
            return domain_gaps(*split(x))
    else:
        def objective(x):
            return residual_sq(*split(x))

        def constraints(x):
            b, sys = split(x)
            return domain_gaps(b, sys) + list(np.abs(corr_gaps(b, sys)) - epsilon * (1.0 - 1e-6))

    res = differential_evolution(objective, bounds, constraints, cfg.de)
    b, sys = split(res.x)
    report = ""
    if not res.feasible:
        report = (f"no searched point satisfied all constraints (violation {res.violation:.3g})"
                  + (f"; correlation gaps < {epsilon:g} look unattainable, consider a larger epsilon"
                     if mode == "constrained" else ""))
    try:
        model = _bb_model(targets, sys, b, variant)
        gaps = _gaps(model, corr)
    except LevyModelError:
        model, gaps = None, {k: float("nan") for k in keys}
    resid = bb_residuals(targets, sys, b)
    norms = tuple(float(v) for v in np.sqrt(np.sum(resid ** 2, axis=1)))
    return DependenceFit(model, _corr_rmse(gaps), gaps, res, [], norms, report)


def fit_dependence_bb_penalized(target_marginals: Sequence, targets: MarketCorrelations, variant: str,
                                config: Optional[CalibrationConfig] = None) -> DependenceFit:
    """Minimise mean squared correlation gap + ``h`` x summed squared convolution residuals."""
    return _bb_dependence(target_marginals, targets, variant, config or CalibrationConfig(), "penalized")


def fit_dependence_bb_constrained(target_marginals: Sequence, targets: MarketCorrelations, variant: str,
                                  config: Optional[CalibrationConfig] = None,
                                  epsilon: Optional[float] = None) -> DependenceFit:
    """Minimise summed squared convolution residuals subject to every correlation gap < epsilon.

    ``epsilon`` defaults to ``config.bb_epsilon``.  When no searched point
    meets the gaps the result has ``optim.status == "infeasible"`` and a
    human-readable ``report``.
    """
    cfg = config or CalibrationConfig()
    eps = cfg.bb_epsilon if epsilon is None else float(epsilon)
    return _bb_dependence(target_marginals, targets, variant, cfg, "constrained", eps)


# ---------------------------------------------------------------------------
# joint calibration
# ---------------------------------------------------------------------------


class _JointLayout:
    """Vector <-> ModelSpec map for joint calibration of one model family."""

    def __init__(self, family: str, variant: str, n: int, cfg: CalibrationConfig):
        self.family, self.variant, self.n, self.law = family, variant, n, _law(variant)
        mb = _margin_bounds(self.law, cfg)
        npair = n * (n - 1) // 2
        if family == "LS":
            self.bounds = mb * n
            if variant.startswith("u"):
                self.bounds += [cfg.bounds["alpha"]] * n + [cfg.bounds["a"]]
            else:
                # a enters as a fraction of its upper bound min kappa_j^-m
                self.bounds += [(1e-6, 1.0 - _EDGE)]
            self.bounds += [(-1.0, 1.0)] * npair
        else:
            self.bounds = mb * n + mb + [cfg.bounds["b"]] * n

    def decode(self, x) -> ModelSpec:
        n, law = self.n, self.law
        margs = tuple(_margin(law, x[3 * k:3 * k + 3]) for k in range(n))
        if self.family == "LS":
            k = 3 * n
            if self.variant.startswith("u"):
                alphas = tuple(float(v) for v in x[k:k + n])
                a = float(x[k + n])
                rho = _rho_from(x[k + n + 1:], n)
                return ModelSpec(LSParams(margs, a, rho, self.variant, alphas))
            a = float(x[k]) * _a_max(margs, law)
            return ModelSpec(LSParams(margs, a, _rho_from(x[k + 1:], n), self.variant))
        sys = _margin(law, x[3 * n:3 * n + 3])
        b = tuple(float(v) for v in x[3 * n + 3:])
        if self.variant.startswith("c"):
            return _bb_model(margs, sys, b, self.variant)
        return ModelSpec(BBParams(margs, sys, b, self.variant))

    def structural_gaps(self, x) -> list:
        """Domain constraints that can be evaluated without building a model."""
        n, law = self.n, self.law
        margs = [_margin(law, x[3 * k:3 * k + 3]) for k in range(n)]
        out = [g for m in margs for g in _margin_gaps(m)]
        if self.family == "LS":
            out += [_mgf_gap(m) for m in margs]
            if n > 2:
                out += _psd_gap(_rho_from(x[-(n * (n - 1) // 2):], n))
            return out
        sys = _margin(law, x[3 * n:3 * n + 3])
        b = x[3 * n + 3:]
        out += _margin_gaps(sys) + [_mgf_gap(sys, bj) for bj in b]
        if self.variant.startswith("c"):
            out += _bb_inequalities(margs, sys, b)
            idio = derive_idiosyncratic(margs, sys, b)
            if all(np.isfinite(m.as_tuple()).all() for m in idio):
                out += [_mgf_gap(m) for m in idio] + [g for m in idio for g in _margin_gaps(m)]
        else:
            out += [_mgf_gap(m) for m in margs]
        return out


def fit_joint(surfaces: Sequence[VolSurface], targets: MarketCorrelations, model: str,
              config: Optional[CalibrationConfig] = None, epsilon: Optional[float] = None) -> CalibrationResult:
    """Fit all parameters at once: summed weighted marginal objectives subject
    to ``|rho_model(i,j) - rho_mkt(i,j)| < epsilon`` for every target pair.

    Constrained BB models also add ``h`` x the squared convolution residuals
    to the objective, so the fitted margins stay consistent with the factor
    structure.
    """
    t0 = time.perf_counter()
    cfg = config or CalibrationConfig()
    eps = cfg.epsilon if epsilon is None else float(epsilon)
    family, variant = parse_model_name(model)
    n = len(surfaces)
    if n < 2 or targets.n_assets != n:
        raise ValueError("need one surface per asset (at least two) matching the correlation targets")
    layout = _JointLayout(family, variant, n, cfg)
    keys, tv = targets.keys(), targets.values()

    def build(x):
        try:
            spec = layout.decode(x)
        except (ValueError, ZeroDivisionError):
            return None
        return spec if not validate_domain(spec) else None

    def constraints(x):
        gaps = layout.structural_gaps(x)
        spec = build(x) if all(g <= 0 for g in gaps) else None
        if spec is None:
            return gaps + [1.0] * len(keys)
        corr = np.array([theoretical_correlation(spec, i, j) for i, j in keys])
        return gaps + list(np.abs(corr - tv) - eps * (1.0 - 1e-6))

    def objective(x):
        viol = sum(max(g, 0.0) for g in layout.structural_gaps(x))
        spec = build(x) if viol <= 0 else None
        if spec is None:
            return SENTINEL + viol
        total = sum(marginal_objective(spec, s, j, cfg.cos) for j, s in enumerate(surfaces))
        if family == "BB" and variant.startswith("c"):
            p = spec.params
            total += cfg.h * float(np.sum(bb_residuals(p.target_marginals, p.sys, p.loadings) ** 2))
        return total

    res = differential_evolution(objective, layout.bounds, constraints, cfg.de)
    spec = build(res.x)
    if spec is None:
        raise LevyModelError("joint calibration ended outside the model domain; widen the parameter bounds")
    result = _summarise(spec, surfaces, targets, cfg, "joint", [("joint", res)], eps)
    if res.status == INFEASIBLE:
        result.flags.append(f"correlation gaps < {eps:g} not attained; consider a larger epsilon")
    result.wall_time = time.perf_counter() - t0
    return result


def _summarise(spec: ModelSpec, surfaces, targets, cfg, procedure, stages, eps) -> CalibrationResult:
    rmse = tuple(vol_rmse(model_vols(spec, s, j, cfg.cos), s) for j, s in enumerate(surfaces))
    gaps = _gaps(spec, targets)
    norms = None
    if spec.family == "BB" and spec.constrained:
        p = spec.params
        r = bb_residuals(p.target_marginals, p.sys, p.loadings)
        norms = tuple(float(v) for v in np.sqrt(np.sum(r ** 2, axis=1)))
    return CalibrationResult(spec, procedure, _stage_status([r for _, r in stages]), rmse, _corr_rmse(gaps),
                             gaps, norms, [], eps, list(stages))


# ---------------------------------------------------------------------------
# two-step and the escalation ladder
# ---------------------------------------------------------------------------


def fit_two_step(surfaces: Sequence[VolSurface], targets: MarketCorrelations, model: str,
                 config: Optional[CalibrationConfig] = None, bb_mode: str = "constrained",
                 epsilon: Optional[float] = None) -> CalibrationResult:
    """Margins first, then dependence with the margins held fixed (constrained models only).

    For constrained BB models ``bb_mode`` picks the epsilon-constrained
    (default) or the h-penalised dependence problem.
    """
    t0 = time.perf_counter()
    cfg = config or CalibrationConfig()
    family, variant = parse_model_name(model)
    if not variant.startswith("c"):
        raise ValueError(f"joint calibration required for unconstrained model {model}")
    fits = [fit_marginal(s, variant, cfg) for s in surfaces]
    margs = tuple(f.marginal for f in fits)
    stages = [(f"marginal[{j}]", f.optim) for j, f in enumerate(fits)]
    if family == "LS":
        dep = fit_dependence_ls(margs, targets, variant, cfg)
        eps = None
    elif bb_mode == "penalized":
        dep = fit_dependence_bb_penalized(margs, targets, variant, cfg)
        eps = None
    else:
        eps = cfg.bb_epsilon if epsilon is None else float(epsilon)
        dep = fit_dependence_bb_constrained(margs, targets, variant, cfg, eps)
    stages.append(("dependence", dep.optim))
    if dep.model is None:
        raise LevyModelError(f"dependence stage ended outside the model domain: {dep.report}")
    result = _summarise(dep.model, surfaces, targets, cfg, "two-step", stages, eps)
    result.flags += dep.flags + ([dep.report] if dep.report else [])
    result.wall_time = time.perf_counter() - t0
    return result


def calibrate(surfaces: Sequence[VolSurface], targets: MarketCorrelations, model: str,
              config: Optional[CalibrationConfig] = None, procedure: str = "auto",
              log: Optional[Callable[[str], None]] = None) -> CalibrationResult:
    """Run the calibration ladder for ``model``.

    * constrained LS: two-step; if any correlation gap exceeds epsilon, joint.
    * constrained BB: two-step with the epsilon-constrained dependence problem,
      relaxing epsilon along ``bb_epsilon, *escalation`` while infeasible.
    * unconstrained: joint, relaxing epsilon along ``epsilon, *escalation``.

    ``procedure`` may force ``"two-step"`` or ``"joint"``.
    """
    cfg = config or CalibrationConfig()
    family, variant = parse_model_name(model)
    say = log or (lambda msg: None)
    if procedure not in ("auto", "two-step", "joint"):
        raise ValueError(f"unknown procedure {procedure!r}")
    if procedure == "two-step" and not variant.startswith("c"):
        raise ValueError(f"joint required for unconstrained model {model}")
    t0 = time.perf_counter()
    history = []

    def ladder(first):
        return [first] + [e for e in cfg.escalation if e > first]

    if procedure == "joint" or (procedure == "auto" and not variant.startswith("c")):
        for eps in ladder(cfg.epsilon):
            res = fit_joint(surfaces, targets, model, cfg, eps)
            history.append(f"joint(epsilon={eps:g}): {res.status}")
            say(history[-1])
            if res.status != INFEASIBLE:
                break
    elif family == "BB":
        for eps in ladder(cfg.bb_epsilon):
            res = fit_two_step(surfaces, targets, model, cfg, "constrained", eps)
            history.append(f"two-step(epsilon={eps:g}): {res.status}")
            say(history[-1])
            if res.status != INFEASIBLE:
                break
    else:
        res = fit_two_step(surfaces, targets, model, cfg)
        history.append(f"two-step: {res.status}, max correlation gap {res.max_gap:.4g}")
        say(history[-1])
        if procedure == "auto" and res.max_gap > cfg.epsilon:
            for eps in ladder(cfg.epsilon):
                res = fit_joint(surfaces, targets, model, cfg, eps)
                history.append(f"escalated to joint(epsilon={eps:g}): {res.status}")
                say(history[-1])
                if res.status != INFEASIBLE:
                    break
    res.flags = history + res.flags
    res.wall_time = time.perf_counter() - t0
    return res
