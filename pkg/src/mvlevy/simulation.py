"""Exact Monte Carlo simulation of multivariate Lévy log-returns at contract dates.

Increments between dates are drawn from their exact laws, so there is no
discretisation bias at any grid spacing.  Randomness is organised in
substreams: every ``(block, date, kind, asset)`` tuple owns an independent
Philox stream derived from the run seed.  Paths are grouped into fixed
blocks of ``BLOCK_SIZE``; because each substream is consumed sequentially
per path, the first ``k`` paths of a run are identical for any
``n_paths >= k``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special, stats

from .errors import PSDError
from .models import (
    AssetEconomy,
    LSParams,
    ModelSpec,
    SubordinatorLaw,
    ls_subordinator_laws,
    martingale_correction,
    require_valid,
)

BLOCK_SIZE = 1 << 16

# substream kinds
IDIO_CLOCK, COMMON_CLOCK, IDIO_NORMAL, COMMON_NORMAL = range(4)


@dataclass(frozen=True)
class DateGrid:
    """Contract dates as year fractions from the valuation date ``t_0 = 0``."""

    times: tuple

    def __post_init__(self):
        t = tuple(float(x) for x in np.atleast_1d(self.times))
        if not t:
            raise ValueError("date grid is empty")
        if t[0] <= 0:
            raise ValueError("first date must be after the valuation date")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("dates must be strictly increasing")
        object.__setattr__(self, "times", t)

    @property
    def m(self) -> int:
        return len(self.times)

    @property
    def dts(self) -> np.ndarray:
        return np.diff((0.0,) + self.times)


@dataclass(frozen=True, eq=False)
class PathBatch:
    """Simulated prices ``S_j(t_i)`` with shape (n_paths, m, n_assets)."""

    prices: np.ndarray
    grid: DateGrid
    seed: int
    fingerprint: str

    @property
    def n_paths(self) -> int:
        return self.prices.shape[0]

    def dump(self, path) -> None:
        """Write one row per path, columns ``t{i}_a{j}``; seed and model in the header."""
        n_paths, m, n = self.prices.shape
        cols = [f"t{i}_a{j}" for i in range(m) for j in range(n)]
        with open(path, "w") as fh:
            fh.write("# mvlevy.paths/1\n")
            fh.write(f"# seed={self.seed}\n")
            fh.write(f"# model={self.fingerprint}\n")
            fh.write("# times=" + ",".join(repr(t) for t in self.grid.times) + "\n")
            np.savetxt(fh, self.prices.reshape(n_paths, m * n), delimiter=",",
                       header=",".join(cols), comments="", fmt="%.17g")

    @classmethod
    def load(cls, path) -> "PathBatch":
        meta = {}
        with open(path) as fh:
            for line in fh:
                if not line.startswith("#"):
                    header = line
                    break
                if "=" in line:
                    k, v = line[1:].strip().split("=", 1)
                    meta[k] = v
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        times = tuple(float(x) for x in meta["times"].split(","))
        n = len(header.strip().split(",")) // len(times)
        return cls(data.reshape(data.shape[0], len(times), n), DateGrid(times), int(meta["seed"]), meta["model"])


def resolve_seed(seed: Optional[int]) -> int:
    """Return ``seed`` or draw a fresh 63-bit one from OS entropy."""
    if seed is None:
        return int(np.random.SeedSequence().generate_state(1, dtype=np.uint64)[0] >> 1)
    return int(seed)


def substream(seed: int, block: int, date: int, kind: int, asset: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(block, date, kind, asset))
    return np.random.Generator(np.random.Philox(ss))


def sample_gamma_increment(shape, rate, rng, size=None, method: str = "rejection"):
    """Gamma(shape, rate) draws; ``shape`` is already scaled by the time step.

    ``method="inverse"`` maps uniforms through the inverse CDF, which keeps
    draws monotone in the parameters (common random numbers).
    """
    if shape <= 0 or rate <= 0:
        raise ValueError("gamma shape and rate must be positive")
    if method == "inverse":
        return special.gammaincinv(shape, rng.random(size)) / rate
    return rng.standard_gamma(shape, size) / rate


def sample_ig_increment(shape, rate, rng, size=None, method: str = "rejection"):
    """IG(shape, rate) draws with mean ``shape/rate`` and variance ``shape/rate^3``.

    IG(a, b) is the Wald law with mean ``a/b`` and shape ``a^2``; the default
    sampler uses the Michael-Schucany-Haas transformation.
    """
    if shape <= 0 or rate <= 0:
        raise ValueError("IG shape and rate must be positive")
    mean, lam = shape / rate, shape * shape
    if method == "inverse":
        return stats.invgauss.ppf(rng.random(size), mean / lam, scale=lam)
    return rng.wald(mean, lam, size)


def _draw_clock(law: SubordinatorLaw, dt: float, rng, size, method):
    if law.kind == "gamma":
        return sample_gamma_increment(law.shape * dt, law.rate, rng, size, method)
    return sample_ig_increment(law.shape * dt, law.rate, rng, size, method)


def common_factor(rho: np.ndarray) -> np.ndarray:
    """Matrix ``C`` with ``C C^T = rho``; Cholesky with a symmetric-root fallback
    for singular (but positive semidefinite) matrices."""
    try:
        return np.linalg.cholesky(rho)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(0.5 * (rho + rho.T))
        if w.min() < -1e-10 * max(1.0, w.max()):
            raise PSDError(f"rho is not positive semidefinite (min eigenvalue {w.min():.3g})") from None
        return v * np.sqrt(np.clip(w, 0.0, None))


def _ls_block(p: LSParams, dts, seed, blk, size, method):
    n = p.n
    mu, sigma, kappa = p.subordinated()
    xs, z = ls_subordinator_laws(p)
    mu_r = mu * kappa
    c = common_factor(p.rho) * (sigma * np.sqrt(kappa))[:, None]
    out = np.empty((size, len(dts), n))
    for d, dt in enumerate(dts):
        dz = _draw_clock(z, dt, substream(seed, blk, d, COMMON_CLOCK, 0), size, method)
        nz = np.column_stack([substream(seed, blk, d, COMMON_NORMAL, j).standard_normal(size) for j in range(n)])
        common = mu_r * dz[:, None] + np.sqrt(dz)[:, None] * (nz @ c.T)
        for j in range(n):
            dx = _draw_clock(xs[j], dt, substream(seed, blk, d, IDIO_CLOCK, j), size, method)
            nx = substream(seed, blk, d, IDIO_NORMAL, j).standard_normal(size)
            out[:, d, j] = mu[j] * dx + sigma[j] * np.sqrt(dx) * nx + common[:, j]
    return out


def _univariate(marg, dt, seed, blk, d, asset, kind_clock, kind_normal, size, method):
    mu, sigma, kappa = marg.subordinated()
    if marg.law == "VG":
        law = SubordinatorLaw("gamma", 1.0 / kappa, 1.0 / kappa)
    else:
        law = SubordinatorLaw("ig", 1.0, 1.0 / math.sqrt(kappa))
    g = _draw_clock(law, dt, substream(seed, blk, d, kind_clock, asset), size, method)
    nrm = substream(seed, blk, d, kind_normal, asset).standard_normal(size)
    return mu * g + sigma * np.sqrt(g) * nrm


def _bb_block(p, dts, seed, blk, size, method):
    out = np.empty((size, len(dts), p.n))
    for d, dt in enumerate(dts):
        zi = _univariate(p.sys, dt, seed, blk, d, 0, COMMON_CLOCK, COMMON_NORMAL, size, method)
        for j, (x, b) in enumerate(zip(p.idio, p.loadings)):
            out[:, d, j] = _univariate(x, dt, seed, blk, d, j, IDIO_CLOCK, IDIO_NORMAL, size, method) + b * zi
    return out


def simulate_log_returns(model: ModelSpec, grid: DateGrid, n_paths: int, seed: int,
                         method: str = "rejection") -> np.ndarray:
    """Log-return increments ``Y(t_i) - Y(t_{i-1})``, shape (n_paths, m, n_assets).

    LS: ``mu_j dX_j + sigma_j sqrt(dX_j) N_j`` plus the common-clock term
    ``mu_j kappa_j dZ + sqrt(dZ) (C N)_j`` with ``C C^T`` the common-clock
    covariance.  BB: each ``X_j`` and ``Z`` is a univariate subordinated
    Brownian motion, combined as ``X_j + b_j Z``.
    """
    require_valid(model)
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    if method not in ("rejection", "inverse"):
        raise ValueError(f"unknown sampling method {method!r}")
    if model.family == "LS":
        common_factor(model.params.rho)
    block = _ls_block if model.family == "LS" else _bb_block
    dts = grid.dts
    chunks = []
    for blk in range(-(-n_paths // BLOCK_SIZE)):
        size = min(BLOCK_SIZE, n_paths - blk * BLOCK_SIZE)
        chunks.append(block(model.params, dts, seed, blk, size, method))
    return np.concatenate(chunks, axis=0)


def drift_terms(model: ModelSpec, economy: AssetEconomy) -> np.ndarray:
    """Per-asset deterministic drift ``r - q_j + g_j``."""
    if economy.n != model.n_assets:
        raise ValueError("economy and model dimensions differ")
    g = np.array([martingale_correction(model, j) for j in range(model.n_assets)])
    return economy.rate - np.asarray(economy.dividends) + g


def assemble_prices(log_returns: np.ndarray, economy: AssetEconomy, model: ModelSpec,
                    grid: DateGrid, seed: int = 0, spots=None) -> PathBatch:
    """Turn increments into ``S_j(t) = S_j(0) exp((r - q_j + g_j) t + Y_j(t))``.

    ``spots`` overrides the economy spots (used to re-price the same paths
    at several moneyness levels).
    """
    drift = drift_terms(model, economy)
    s0 = np.asarray(economy.spots if spots is None else spots, dtype=float)
    t = np.asarray(grid.times)
    logs = np.cumsum(log_returns, axis=1) + t[None, :, None] * drift[None, None, :]
    return PathBatch(s0 * np.exp(logs), grid, seed, model.fingerprint())


def simulate_paths(model: ModelSpec, economy: AssetEconomy, grid: DateGrid, n_paths: int,
                   seed: Optional[int] = None, method: str = "rejection") -> PathBatch:
    seed = resolve_seed(seed)
    y = simulate_log_returns(model, grid, n_paths, seed, method)
    return assemble_prices(y, economy, model, grid, seed)
