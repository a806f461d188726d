"""Global optimisation: differential evolution followed by simplex refinement.

Constraints are given as a single callable ``g(x)`` returning an array; a
point is feasible when every entry is ``<= 0``.  Selection inside DE is
feasibility-first (scipy's Lampinen rule); the Nelder-Mead stage works on
an exact-penalty surrogate and its result is kept only when it is feasible
and strictly better.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize

CONVERGED, BUDGET_EXHAUSTED, INFEASIBLE = "converged", "budget_exhausted", "infeasible"


@dataclass(frozen=True)
class DESettings:
    popsize: int = 15
    mutation: tuple = (0.5, 1.0)
    recombination: float = 0.7
    maxiter: int = 300
    tol: float = 1e-8
    atol: float = 1e-13
    refine: bool = True
    refine_maxfev: int = 4000
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.popsize < 2 or self.maxiter < 1:
            raise ValueError("popsize must be >= 2 and maxiter >= 1")
        if not 0 <= self.recombination <= 1:
            raise ValueError("recombination must lie in [0, 1]")
        lo, hi = self.mutation if isinstance(self.mutation, tuple) else (self.mutation, self.mutation)
        if not 0 <= lo <= hi <= 2:
            raise ValueError("mutation must lie in [0, 2]")


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    violation: float
    status: str
    generations: int
    nfev: int
    trace: list = field(default_factory=list)
    refined: bool = False

    @property
    def feasible(self) -> bool:
        return self.violation <= 0.0


def total_violation(constraints: Optional[Callable], x) -> float:
    if constraints is None:
        return 0.0
    g = np.atleast_1d(np.asarray(constraints(x), dtype=float))
    if not np.all(np.isfinite(g)):
        return np.inf
    return float(np.clip(g, 0.0, None).sum())


def differential_evolution(objective: Callable, bounds: Sequence[tuple], constraints: Optional[Callable] = None,
                           settings: Optional[DESettings] = None) -> OptimResult:
    """Minimise ``objective`` over the box ``bounds`` subject to ``constraints(x) <= 0``."""
    s = settings or DESettings()
    bounds = [(float(lo), float(hi)) for lo, hi in bounds]
    if any(not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi) for lo, hi in bounds):
        raise ValueError("all bounds must be finite with lower <= upper")

    trace = []

    def record(intermediate_result):
        trace.append(float(intermediate_result.fun))

    cons = ()
    if constraints is not None:
        cons = (optimize.NonlinearConstraint(lambda x: np.atleast_1d(constraints(x)), -np.inf, 0.0),)

    pool = ThreadPoolExecutor(s.workers) if s.workers > 1 else None
    try:
        res = optimize.differential_evolution(
            objective, bounds, strategy="best1bin", maxiter=s.maxiter, popsize=s.popsize, tol=s.tol,
            atol=s.atol, mutation=s.mutation, recombination=s.recombination, rng=np.random.default_rng(s.seed),
            callback=record, polish=False, init="latinhypercube", updating="deferred",
            workers=pool.map if pool else 1, constraints=cons)
    finally:
        if pool:
            pool.shutdown()

    x = np.asarray(res.x, dtype=float)
    fun = float(res.fun)
    viol = total_violation(constraints, x)
    nfev = int(res.nfev)
    refined = False

    if s.refine and viol <= 0:
        lo = np.array([b[0] for b in bounds])
        hi = np.array([b[1] for b in bounds])
        scale = np.where(hi > lo, hi - lo, 1.0)

        def surrogate(y):
            z = np.clip(lo + y * scale, lo, hi)
            v = total_violation(constraints, z)
            if v > 0:
                return 1e10 * (1.0 + v)
            f = objective(z)
            return f if np.isfinite(f) else 1e10

        y0 = (x - lo) / scale
        simplex = [y0] + [np.clip(y0 + np.eye(len(x))[k] * 0.02 * (1 if y0[k] < 0.5 else -1), 0, 1)
                          for k in range(len(x))]
        loc = optimize.minimize(surrogate, y0, method="Nelder-Mead",
                                options={"xatol": 1e-12, "fatol": 1e-16, "maxfev": s.refine_maxfev,
                                         "initial_simplex": np.array(simplex)})
        nfev += int(loc.nfev)
        cand = np.clip(lo + loc.x * scale, lo, hi)
        if total_violation(constraints, cand) <= 0:
            fc = float(objective(cand))
            if fc < fun:
                x, fun, refined = cand, fc, True

    if viol > 0:
        status = INFEASIBLE
    elif res.success:
        status = CONVERGED
    else:
        status = BUDGET_EXHAUSTED
    return OptimResult(x, fun, viol, status, int(res.nit), nfev, trace, refined)
