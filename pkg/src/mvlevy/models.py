"""Multivariate Lévy log-return models built from VG and NIG laws.

Two constructions are covered, each in a constrained and an unconstrained
flavour and with Variance Gamma or Normal Inverse Gaussian margins:

* ``LS`` -- Brownian motions time-changed by factor subordinators
  ``G_j = X_j + kappa_j Z`` with correlated Brownian motions on the
  common clock.
* ``BB`` -- linear factor model ``Y_j = X_j + b_j Z`` with independent
  univariate Lévy components.

Characteristic exponents are time-1 exponents ``psi`` with
``E[exp(i u Y(t))] = exp(t psi(u))``.  All functions accept complex ``u``
so that the martingale correction can be evaluated at ``u = -i``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import (
    DegenerateParameterError,
    DomainError,
    InfeasibleCorrectionError,
    MisuseError,
    NumericError,
)

VARIANTS = ("cVG", "uVG", "cNIG", "uNIG")
FAMILIES = ("LS", "BB")

# Shipped calibration bounds, informed by the ranges of fitted market parameters.
DEFAULT_BOUNDS = {
    "mu": (-1.2, 0.2),
    "sigma": (0.005, 0.6),
    "kappa": (1e-4, 3.0),
    "beta": (-5.0, 5.0),
    "delta": (0.1, 0.6),
    "gamma": (0.5, 6.7),
}


# ---------------------------------------------------------------------------
# univariate building blocks
# ---------------------------------------------------------------------------


def vg_exponent(u, mu: float, sigma: float, kappa: float):
    """Time-1 characteristic exponent of VG(mu, sigma, kappa)."""
    u = np.asarray(u, dtype=complex)
    return -np.log(1.0 - 1j * u * mu * kappa + 0.5 * u * u * sigma * sigma * kappa) / kappa


def nig_exponent(u, beta: float, delta: float, gamma: float):
    """Time-1 characteristic exponent of NIG(beta, delta, gamma)."""
    u = np.asarray(u, dtype=complex)
    return -delta * (np.sqrt(gamma * gamma - (beta + 1j * u) ** 2) - math.sqrt(gamma * gamma - beta * beta))


@dataclass(frozen=True)
class Violation:
    """One failed range or inequality constraint."""

    param: str
    message: str

    def __str__(self) -> str:
        return f"{self.param}: {self.message}"


def _finite(x) -> bool:
    return bool(np.all(np.isfinite(x)))


@dataclass(frozen=True)
class VGMarginal:
    """Variance Gamma law: Brownian motion with drift ``mu`` and volatility
    ``sigma`` run on a unit-mean Gamma clock with variance ``kappa``."""

    mu: float
    sigma: float
    kappa: float

    law = "VG"

    def exponent(self, u):
        return vg_exponent(u, self.mu, self.sigma, self.kappa)

    def subordinated(self) -> tuple[float, float, float]:
        return self.mu, self.sigma, self.kappa

    def mean(self) -> float:
        return self.mu

    def variance(self) -> float:
        return self.sigma ** 2 + self.mu ** 2 * self.kappa

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.mu, self.sigma, self.kappa)

    def violations(self, name: str = "") -> list[Violation]:
        out = []
        if not _finite(self.mu):
            out.append(Violation(f"{name}mu", f"mu={self.mu} must be finite"))
        if not (self.sigma > 0 and _finite(self.sigma)):
            out.append(Violation(f"{name}sigma", f"sigma={self.sigma} must be > 0"))
        if not (self.kappa > 0 and _finite(self.kappa)):
            out.append(Violation(f"{name}kappa", f"kappa={self.kappa} must be > 0"))
        return out

    def mgf_feasible(self, scale: float = 1.0) -> bool:
        """True when E[exp(scale * Y(1))] is finite."""
        return 1.0 - scale * self.mu * self.kappa - 0.5 * scale ** 2 * self.sigma ** 2 * self.kappa > 0


@dataclass(frozen=True)
class NIGMarginal:
    """Normal Inverse Gaussian law with skew ``beta``, scale ``delta`` and
    tail parameter ``gamma`` (``|beta| < gamma``)."""

    beta: float
    delta: float
    gamma: float

    law = "NIG"

    def exponent(self, u):
        return nig_exponent(u, self.beta, self.delta, self.gamma)

    def subordinated(self) -> tuple[float, float, float]:
        return nig_param_map(self)

    def mean(self) -> float:
        return self.beta * self.delta / math.sqrt(self.gamma ** 2 - self.beta ** 2)

    def variance(self) -> float:
        return self.gamma ** 2 * self.delta * (self.gamma ** 2 - self.beta ** 2) ** -1.5

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.beta, self.delta, self.gamma)

    def violations(self, name: str = "") -> list[Violation]:
        out = []
        if not (self.delta > 0 and _finite(self.delta)):
            out.append(Violation(f"{name}delta", f"delta={self.delta} must be > 0"))
        if not (self.gamma > 0 and _finite(self.gamma)):
            out.append(Violation(f"{name}gamma", f"gamma={self.gamma} must be > 0"))
        if not (_finite(self.beta) and abs(self.beta) < self.gamma):
            out.append(Violation(f"{name}beta", f"|beta| < gamma fails (beta={self.beta}, gamma={self.gamma})"))
        return out

    def mgf_feasible(self, scale: float = 1.0) -> bool:
        return abs(self.beta + scale) < self.gamma


Marginal = Union[VGMarginal, NIGMarginal]


def nig_param_map(nig: NIGMarginal) -> tuple[float, float, float]:
    """Map NIG(beta, delta, gamma) to the subordinated-BM triple (mu, sigma, kappa).

    ``mu = beta delta^2``, ``sigma = delta``, ``kappa = 1 / (delta^2 (gamma^2 - beta^2))``;
    the NIG law is then ``mu G + sigma W(G)`` with ``G ~ IG(1, 1/sqrt(kappa))``
    in the (a, b) form, i.e. mean ``sqrt(kappa)`` and variance ``kappa^1.5``.
    """
    bad = nig.violations()
    if bad:
        raise DomainError(bad)
    d2 = nig.delta ** 2
    return nig.beta * d2, nig.delta, 1.0 / (d2 * (nig.gamma ** 2 - nig.beta ** 2))


@dataclass(frozen=True)
class SubordinatorLaw:
    """Gamma(shape, rate) or IG(shape, rate) time-1 law of a subordinator.

    IG(a, b) has Laplace transform ``exp(-a (sqrt(b^2 + 2s) - b))``, mean
    ``a/b`` and variance ``a/b^3``.
    """

    kind: str
    shape: float
    rate: float

    def laplace_exponent(self, w):
        """``log E[exp(w X)]`` evaluated at (complex) ``w``."""
        w = np.asarray(w, dtype=complex)
        if self.kind == "gamma":
            return -self.shape * np.log(1.0 - w / self.rate)
        return -self.shape * (np.sqrt(self.rate ** 2 - 2.0 * w) - self.rate)

    def mean(self) -> float:
        return self.shape / self.rate

    def variance(self) -> float:
        if self.kind == "gamma":
            return self.shape / self.rate ** 2
        return self.shape / self.rate ** 3

    def scaled(self, c: float) -> "SubordinatorLaw":
        """Law of ``c X`` for ``c > 0``."""
        if self.kind == "gamma":
            return SubordinatorLaw("gamma", self.shape, self.rate / c)
        rc = math.sqrt(c)
        return SubordinatorLaw("ig", self.shape * rc, self.rate / rc)

    def convolve(self, other: "SubordinatorLaw") -> "SubordinatorLaw":
        if self.kind != other.kind or not math.isclose(self.rate, other.rate, rel_tol=1e-12):
            raise MisuseError("convolution closure needs equal kinds and rates")
        return SubordinatorLaw(self.kind, self.shape + other.shape, self.rate)

    def finite_at(self, w: float) -> bool:
        """Whether the Laplace exponent is finite at the real point ``w``."""
        if self.kind == "gamma":
            return w < self.rate
        return self.rate ** 2 - 2.0 * w > 0


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


def _law_of(variant: str) -> str:
    return "VG" if variant.endswith("VG") else "NIG"


def _readonly(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class LSParams:
    """Parameters of a factor-subordinated (LS) model.

    ``marginals`` carry (mu, sigma, kappa) for VG variants and
    (beta, delta, gamma) for NIG variants; ``alphas`` are the idiosyncratic
    shapes of the unconstrained variants; ``rho`` is the correlation matrix of
    the Brownian motion run on the common clock.
    """

    marginals: tuple
    a: float
    rho: np.ndarray
    variant: str = "cVG"
    alphas: Optional[tuple] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        object.__setattr__(self, "marginals", tuple(self.marginals))
        n = len(self.marginals)
        if n < 2:
            raise ValueError("at least two assets are required")
        want = VGMarginal if _law_of(self.variant) == "VG" else NIGMarginal
        for m in self.marginals:
            if not isinstance(m, want):
                raise ValueError(f"variant {self.variant} needs {want.__name__} marginals")
        rho = _readonly(self.rho)
        if rho.shape != (n, n):
            raise ValueError(f"rho must be {n}x{n}, got {rho.shape}")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "a", float(self.a))
        if self.variant.startswith("u"):
            if self.alphas is None or len(self.alphas) != n:
                raise ValueError("unconstrained LS variants need one alpha per asset")
            object.__setattr__(self, "alphas", tuple(float(x) for x in self.alphas))
        elif self.alphas is not None:
            raise ValueError("constrained LS variants take no alphas")

    @property
    def n(self) -> int:
        return len(self.marginals)

    @property
    def law(self) -> str:
        return _law_of(self.variant)

    def subordinated(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(mu, sigma, kappa) vectors of the subordinated Brownian motions."""
        trip = np.array([m.subordinated() for m in self.marginals])
        return trip[:, 0], trip[:, 1], trip[:, 2]

    def common_drift_cov(self) -> tuple[np.ndarray, np.ndarray]:
        """Drift vector and covariance matrix of the Brownian motion on the common clock."""
        mu, sigma, kappa = self.subordinated()
        scale = sigma * np.sqrt(kappa)
        return mu * kappa, self.rho * np.outer(scale, scale)


@dataclass(frozen=True, eq=False)
class BBParams:
    """Parameters of a linear factor (BB) model ``Y_j = X_j + b_j Z``.

    Constrained variants also carry ``target_marginals``, the intended laws
    of ``Y_j``; ``idio`` is always the law actually used for ``X_j``.
    """

    idio: tuple
    sys: object
    loadings: tuple
    variant: str = "cVG"
    target_marginals: Optional[tuple] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        object.__setattr__(self, "idio", tuple(self.idio))
        object.__setattr__(self, "loadings", tuple(float(b) for b in self.loadings))
        n = len(self.idio)
        if n < 2:
            raise ValueError("at least two assets are required")
        if len(self.loadings) != n:
            raise ValueError("one loading per asset is required")
        want = VGMarginal if _law_of(self.variant) == "VG" else NIGMarginal
        for m in self.idio + (self.sys,):
            if not isinstance(m, want):
                raise ValueError(f"variant {self.variant} needs {want.__name__} components")
        if self.target_marginals is not None:
            object.__setattr__(self, "target_marginals", tuple(self.target_marginals))
            if len(self.target_marginals) != n:
                raise ValueError("one target marginal per asset is required")
            for m in self.target_marginals:
                if not isinstance(m, want):
                    raise ValueError(f"variant {self.variant} needs {want.__name__} targets")

    @property
    def n(self) -> int:
        return len(self.idio)

    @property
    def law(self) -> str:
        return _law_of(self.variant)

    @classmethod
    def from_targets(cls, targets: Sequence[Marginal], sys: Marginal, loadings: Sequence[float],
                     variant: str = "cVG") -> "BBParams":
        """Build a constrained model, deriving each ``X_j`` from its target law,
        ``Z`` and ``b_j`` through the convolution relations."""
        idio = derive_idiosyncratic(targets, sys, loadings)
        return cls(idio=idio, sys=sys, loadings=tuple(loadings), variant=variant,
                   target_marginals=tuple(targets))


def derive_idiosyncratic(targets: Sequence[Marginal], sys: Marginal, loadings: Sequence[float]) -> tuple:
    """Idiosyncratic laws implied by target margins, systematic law and loadings.

    VG: ``mu_X = mu - b mu_Z``, ``sigma_X^2 = sigma^2 - b^2 sigma_Z^2``,
    ``kappa_X = kappa kappa_Z / (kappa_Z - kappa)``.
    NIG: ``beta_X = beta``, ``delta_X = delta - b delta_Z``, ``gamma_X = gamma``.
    Out-of-domain results are returned as NaN/negative values, not raised.
    """
    out = []
    for t, b in zip(targets, loadings):
        if isinstance(t, VGMarginal):
            s2 = t.sigma ** 2 - b * b * sys.sigma ** 2
            dk = sys.kappa - t.kappa
            out.append(VGMarginal(
                mu=t.mu - b * sys.mu,
                sigma=math.sqrt(s2) if s2 > 0 else float("nan"),
                kappa=t.kappa * sys.kappa / dk if dk > 0 else float("nan"),
            ))
        else:
            out.append(NIGMarginal(beta=t.beta, delta=t.delta - b * sys.delta, gamma=t.gamma))
    return tuple(out)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """A model instance: family tag, parameters and asset dimension."""

    params: Union[LSParams, BBParams]
    family: str = field(init=False)
    n_assets: int = field(init=False)

    def __post_init__(self):
        if isinstance(self.params, LSParams):
            fam = "LS"
        elif isinstance(self.params, BBParams):
            fam = "BB"
        else:
            raise TypeError("params must be LSParams or BBParams")
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "n_assets", self.params.n)

    @property
    def variant(self) -> str:
        return self.params.variant

    @property
    def name(self) -> str:
        return f"{self.variant[0]}{self.family}-{self.variant[1:]}"

    @property
    def constrained(self) -> bool:
        return self.variant.startswith("c")

    def to_dict(self) -> dict:
        return model_to_dict(self)

    def fingerprint(self) -> str:
        import hashlib
        import json

        blob = json.dumps(model_to_dict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class AssetEconomy:
    """Spot prices, continuously compounded rate and dividend yields."""

    spots: tuple
    rate: float = 0.0
    dividends: Optional[tuple] = None

    def __post_init__(self):
        spots = tuple(float(s) for s in np.atleast_1d(self.spots))
        if not all(s > 0 for s in spots):
            raise ValueError("spots must be strictly positive")
        divs = self.dividends
        divs = tuple(0.0 for _ in spots) if divs is None else tuple(float(q) for q in np.atleast_1d(divs))
        if len(divs) != len(spots):
            raise ValueError("one dividend yield per spot is required")
        object.__setattr__(self, "spots", spots)
        object.__setattr__(self, "dividends", divs)
        object.__setattr__(self, "rate", float(self.rate))

    @property
    def n(self) -> int:
        return len(self.spots)


# ---------------------------------------------------------------------------
# domain validation
# ---------------------------------------------------------------------------


def _rho_violations(rho: np.ndarray) -> list[Violation]:
    out = []
    if not _finite(rho):
        return [Violation("rho", "entries must be finite")]
    if not np.allclose(rho, rho.T, rtol=0, atol=1e-12):
        out.append(Violation("rho", "matrix must be symmetric"))
    if not np.allclose(np.diag(rho), 1.0, rtol=0, atol=1e-12):
        out.append(Violation("rho", "diagonal must be 1"))
    n = rho.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            if abs(rho[i, j]) > 1.0:
                out.append(Violation(f"rho[{i},{j}]", f"|rho_ij| <= 1 fails (rho_ij={rho[i, j]})"))
    if not out:
        min_eig = float(np.linalg.eigvalsh(0.5 * (rho + rho.T)).min())
        if min_eig < -1e-10:
            out.append(Violation("rho", f"matrix must be positive semidefinite (min eigenvalue {min_eig:.3g})"))
    return out


def ls_a_upper_bound(params: LSParams) -> float:
    """Upper bound on ``a`` for constrained LS models: ``min_j kappa_j^-m``
    with ``m = 1`` (VG) or ``m = 1/2`` (NIG)."""
    _, _, kappa = params.subordinated()
    m = 1.0 if params.law == "VG" else 0.5
    return float(np.min(kappa ** -m))


def validate_domain(model: ModelSpec) -> list[Violation]:
    """Every violated range or inequality constraint of ``model``; empty when valid."""
    p = model.params
    out: list[Violation] = []
    if isinstance(p, LSParams):
        for j, m in enumerate(p.marginals):
            out += m.violations(f"marginals[{j}].")
        if not (p.a > 0 and _finite(p.a)):
            out.append(Violation("a", f"a={p.a} must be > 0"))
        if p.variant.startswith("c") and not out:
            bound = ls_a_upper_bound(p)
            form = "min(1/kappa_j)" if p.law == "VG" else "min(delta_j*sqrt(gamma_j^2-beta_j^2))"
            if p.a >= bound:
                out.append(Violation("a", f"a={p.a:g} >= {form} = {bound:g}"))
        if p.alphas is not None:
            for j, al in enumerate(p.alphas):
                if not (al > 0 and _finite(al)):
                    out.append(Violation(f"alphas[{j}]", f"alpha={al} must be > 0"))
        out += _rho_violations(p.rho)
        return out

    for j, m in enumerate(p.idio):
        out += m.violations(f"idio[{j}].")
    out += p.sys.violations("sys.")
    for j, b in enumerate(p.loadings):
        if not (b > 0 and _finite(b)):
            out.append(Violation(f"loadings[{j}]", f"b={b} must be > 0"))
    if p.variant.startswith("c"):
        if p.target_marginals is None:
            out.append(Violation("target_marginals", "constrained BB variants need target marginals"))
            return out
        for j, m in enumerate(p.target_marginals):
            out += m.violations(f"target_marginals[{j}].")
        z = p.sys
        for j, (t, b) in enumerate(zip(p.target_marginals, p.loadings)):
            if p.law == "VG":
                gap = t.sigma ** 2 - b * b * z.sigma ** 2
                if not gap > 0:
                    out.append(Violation(f"loadings[{j}]", f"sigma_j^2 - b_j^2 sigma_Z^2 = {gap:.6g} must be > 0"))
                if not z.kappa - t.kappa > 0:
                    out.append(Violation("sys.kappa", f"kappa_Z - kappa_{j} = {z.kappa - t.kappa:.6g} must be > 0"))
            else:
                gap = t.delta - b * z.delta
                if not gap > 0:
                    out.append(Violation(f"loadings[{j}]", f"delta_j - b_j delta_Z = {gap:.6g} must be > 0"))
    return out


def require_valid(model: ModelSpec) -> None:
    bad = validate_domain(model)
    if bad:
        raise DomainError(bad)


# ---------------------------------------------------------------------------
# subordinators and characteristic functions
# ---------------------------------------------------------------------------


def ls_subordinator_laws(params: LSParams) -> tuple[list[SubordinatorLaw], SubordinatorLaw]:
    """Laws of the idiosyncratic subordinators ``X_j`` and of the common ``Z``."""
    _, _, kappa = params.subordinated()
    a = params.a
    if params.law == "VG":
        z = SubordinatorLaw("gamma", a, 1.0)
        if params.variant == "cVG":
            xs = [SubordinatorLaw("gamma", 1.0 / k - a, 1.0 / k) for k in kappa]
        else:
            xs = [SubordinatorLaw("gamma", al, 1.0 / k) for al, k in zip(params.alphas, kappa)]
    else:
        z = SubordinatorLaw("ig", a, 1.0)
        if params.variant == "cNIG":
            xs = [SubordinatorLaw("ig", 1.0 - a * math.sqrt(k), 1.0 / math.sqrt(k)) for k in kappa]
        else:
            xs = [SubordinatorLaw("ig", al, 1.0 / math.sqrt(k)) for al, k in zip(params.alphas, kappa)]
    return xs, z


@dataclass(frozen=True)
class EffectiveSubordinator:
    idiosyncratic: SubordinatorLaw
    common: SubordinatorLaw
    total: SubordinatorLaw


def ls_effective_subordinator(model: ModelSpec, asset: int) -> EffectiveSubordinator:
    """Component laws of ``G_j = X_j + kappa_j Z`` and the law of ``G_j`` itself."""
    if model.family != "LS":
        raise MisuseError("effective subordinators exist only for LS models")
    require_valid(model)
    xs, z = ls_subordinator_laws(model.params)
    _, _, kappa = model.params.subordinated()
    total = xs[asset].convolve(z.scaled(float(kappa[asset])))
    return EffectiveSubordinator(xs[asset], z, total)


def marginal_exponent(model: ModelSpec, asset: int, u):
    """Time-1 characteristic exponent of ``Y_asset`` (no domain check)."""
    p = model.params
    if isinstance(p, LSParams):
        m = p.marginals[asset]
        base = m.exponent(u)
        if p.variant in ("cVG", "cNIG"):
            return base
        if p.variant == "uVG":
            return (p.alphas[asset] + p.a) * m.kappa * base
        _, _, kappa = p.subordinated()
        return (p.alphas[asset] + p.a * math.sqrt(kappa[asset])) * base
    return p.idio[asset].exponent(u) + p.sys.exponent(p.loadings[asset] * np.asarray(u, dtype=complex))


def joint_exponent(model: ModelSpec, u):
    """Time-1 joint characteristic exponent; ``u`` has trailing dimension n."""
    p = model.params
    u = np.asarray(u, dtype=complex)
    if u.shape[-1] != p.n:
        raise ValueError(f"u must have trailing dimension {p.n}")
    if isinstance(p, LSParams):
        mu, sigma, _ = p.subordinated()
        xs, z = ls_subordinator_laws(p)
        psi_b = 1j * mu * u - 0.5 * sigma ** 2 * u * u
        total = sum(x.laplace_exponent(psi_b[..., j]) for j, x in enumerate(xs))
        mu_r, cov_r = p.common_drift_cov()
        quad = np.einsum("...i,ij,...j->...", u, cov_r, u)
        return total + z.laplace_exponent(1j * (u @ mu_r) - 0.5 * quad)
    b = np.asarray(p.loadings)
    total = sum(m.exponent(u[..., j]) for j, m in enumerate(p.idio))
    return total + p.sys.exponent(u @ b)


def _exp_checked(x):
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.exp(x)
    if not _finite(out):
        raise NumericError(f"characteristic function overflow (max Re exponent {np.max(np.real(x)):.4g})")
    return out


def marginal_cf(model: ModelSpec, asset: int, u, t: float = 1.0):
    """``E[exp(i u Y_asset(t))]`` via the Lévy property ``exp(t psi(u))``."""
    require_valid(model)
    if t <= 0:
        raise ValueError("t must be positive")
    return _exp_checked(t * marginal_exponent(model, asset, u))


def joint_cf(model: ModelSpec, u, t: float = 1.0):
    """``E[exp(i <u, Y(t)>)]``."""
    require_valid(model)
    if t <= 0:
        raise ValueError("t must be positive")
    return _exp_checked(t * joint_exponent(model, u))


def target_marginal_cf(model: ModelSpec, asset: int, u, t: float = 1.0):
    """CF of the target law of a constrained BB margin."""
    p = model.params
    if model.family != "BB" or p.target_marginals is None:
        raise MisuseError("target marginals exist only for constrained BB models")
    return _exp_checked(t * p.target_marginals[asset].exponent(u))


# ---------------------------------------------------------------------------
# moments, correlation, martingale correction
# ---------------------------------------------------------------------------


def marginal_moments(model: ModelSpec, asset: int) -> tuple[float, float]:
    """Time-1 mean and variance of ``Y_asset`` from closed-form component moments."""
    p = model.params
    if isinstance(p, LSParams):
        mu, sigma, kappa = p.subordinated()
        xs, z = ls_subordinator_laws(p)
        g = xs[asset].convolve(z.scaled(float(kappa[asset])))
        return mu[asset] * g.mean(), sigma[asset] ** 2 * g.mean() + mu[asset] ** 2 * g.variance()
    b = p.loadings[asset]
    x = p.idio[asset]
    return x.mean() + b * p.sys.mean(), x.variance() + b * b * p.sys.variance()


def theoretical_correlation(model: ModelSpec, i: int, j: int) -> float:
    """Closed-form linear correlation of ``(Y_i(1), Y_j(1))``.

    Constrained BB models normalise by the target-law variances, as used in
    the dependence calibration; with zero convolution residuals this is the
    correlation of the simulated process.
    """
    if i == j:
        raise ValueError("i and j must differ")
    require_valid(model)
    p = model.params
    if isinstance(p, LSParams):
        mu, sigma, kappa = p.subordinated()
        num = p.a * (mu[i] * mu[j] * kappa[i] * kappa[j]
                     + p.rho[i, j] * sigma[i] * sigma[j] * math.sqrt(kappa[i] * kappa[j]))
        var = []
        for k in (i, j):
            m = p.marginals[k]
            v = m.variance()
            if p.variant == "uVG":
                v *= kappa[k] * (p.alphas[k] + p.a)
            elif p.variant == "uNIG":
                v *= p.alphas[k] + p.a * math.sqrt(kappa[k])
            var.append(v)
    else:
        vz = p.sys.variance()
        num = p.loadings[i] * p.loadings[j] * vz
        if p.variant.startswith("c"):
            var = [p.target_marginals[k].variance() for k in (i, j)]
        else:
            var = [p.idio[k].variance() + p.loadings[k] ** 2 * vz for k in (i, j)]
    if not (var[0] > 0 and var[1] > 0) or not _finite(var):
        raise DegenerateParameterError(f"marginal variance vanished for pair ({i}, {j}): {var}")
    return float(num / math.sqrt(var[0] * var[1]))


def correlation_matrix(model: ModelSpec) -> np.ndarray:
    n = model.n_assets
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = theoretical_correlation(model, i, j)
    return out


def martingale_feasible(model: ModelSpec, asset: int) -> bool:
    """Whether ``-i`` lies in the analyticity strip of ``psi_{Y_asset}``."""
    p = model.params
    if isinstance(p, LSParams):
        mu, sigma, kappa = p.subordinated()
        w = mu[asset] + 0.5 * sigma[asset] ** 2
        xs, z = ls_subordinator_laws(p)
        return xs[asset].finite_at(w) and z.finite_at(kappa[asset] * w)
    return p.idio[asset].mgf_feasible(1.0) and p.sys.mgf_feasible(p.loadings[asset])


def martingale_correction(model: ModelSpec, asset: int) -> float:
    """Drift correction ``g_j = -psi_{Y_j}(-i)``."""
    require_valid(model)
    if not martingale_feasible(model, asset):
        raise InfeasibleCorrectionError(
            f"E[exp(Y_{asset}(1))] is infinite for {model.name}; martingale correction undefined")
    psi = marginal_exponent(model, asset, -1j)
    return float(-np.real(psi))


def convolution_residuals(model: ModelSpec) -> np.ndarray:
    """Per-asset residual pairs ``(c_j1, c_j2)`` of the convolution conditions.

    VG: ``kappa_j mu_j - kappa_Z b_j mu_Z`` and ``kappa_j sigma_j^2 - kappa_Z b_j^2 sigma_Z^2``.
    NIG: ``beta_j - beta_Z / b_j`` and ``gamma_j - gamma_Z / b_j``.
    """
    p = model.params
    if model.family != "BB" or not p.variant.startswith("c"):
        raise MisuseError("convolution residuals apply to constrained BB models only")
    if p.target_marginals is None:
        raise MisuseError("constrained BB model has no target marginals")
    return bb_residuals(p.target_marginals, p.sys, p.loadings)


def bb_residuals(targets, sys, loadings) -> np.ndarray:
    out = np.empty((len(targets), 2))
    for j, (t, b) in enumerate(zip(targets, loadings)):
        if isinstance(t, VGMarginal):
            out[j, 0] = t.kappa * t.mu - sys.kappa * b * sys.mu
            out[j, 1] = t.kappa * t.sigma ** 2 - sys.kappa * b * b * sys.sigma ** 2
        else:
            out[j, 0] = t.beta - sys.beta / b
            out[j, 1] = t.gamma - sys.gamma / b
    return out


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

SCHEMA = "mvlevy.model/1"
_FIELDS = {"VG": ("mu", "sigma", "kappa"), "NIG": ("beta", "delta", "gamma")}


def _pack(margs, law) -> dict:
    return {f: [float(getattr(m, f)) for m in margs] for f in _FIELDS[law]}


def _unpack(block: dict, law) -> tuple:
    cls = VGMarginal if law == "VG" else NIGMarginal
    names = _FIELDS[law]
    cols = [block[f] for f in names]
    return tuple(cls(*map(float, vals)) for vals in zip(*cols))


def model_to_dict(model: ModelSpec) -> dict:
    p = model.params
    law = p.law
    d = {"schema": SCHEMA, "family": model.family, "variant": p.variant, "n_assets": p.n}
    if isinstance(p, LSParams):
        d["marginals"] = _pack(p.marginals, law)
        d["a"] = p.a
        d["alphas"] = list(p.alphas) if p.alphas is not None else None
        d["rho_lower"] = [float(p.rho[i, j]) for i in range(p.n) for j in range(i)]
    else:
        d["idio"] = _pack(p.idio, law)
        d["sys"] = {f: float(getattr(p.sys, f)) for f in _FIELDS[law]}
        d["loadings"] = list(p.loadings)
        d["targets"] = _pack(p.target_marginals, law) if p.target_marginals is not None else None
    return d


def model_from_dict(d: dict) -> ModelSpec:
    if d.get("schema", SCHEMA) != SCHEMA:
        raise ValueError(f"unsupported model schema {d.get('schema')!r}")
    variant = d["variant"]
    law = _law_of(variant)
    if d["family"] == "LS":
        margs = _unpack(d["marginals"], law)
        n = len(margs)
        rho = np.eye(n)
        lower = list(d.get("rho_lower", []))
        if len(lower) != n * (n - 1) // 2:
            raise ValueError("rho_lower must list n(n-1)/2 entries")
        it = iter(lower)
        for i in range(n):
            for j in range(i):
                rho[i, j] = rho[j, i] = float(next(it))
        alphas = d.get("alphas")
        return ModelSpec(LSParams(margs, float(d["a"]), rho, variant, tuple(alphas) if alphas else None))
    if d["family"] == "BB":
        cls = VGMarginal if law == "VG" else NIGMarginal
        sys = cls(*(float(d["sys"][f]) for f in _FIELDS[law]))
        targets = d.get("targets")
        return ModelSpec(BBParams(
            idio=_unpack(d["idio"], law), sys=sys, loadings=tuple(d["loadings"]), variant=variant,
            target_marginals=_unpack(targets, law) if targets else None,
        ))
    raise ValueError(f"unknown family {d['family']!r}")
