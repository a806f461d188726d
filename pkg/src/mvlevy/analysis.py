"""Price sensitivities of WP notes to linear correlation and to the
nonlinear-dependence parameter ``a`` of constrained LS models.

Both studies hold the margins fixed.  The correlation study keeps ``a``
and moves ``rho_ij`` so that the theoretical correlation hits each target;
the nonlinear study moves ``a`` and re-solves ``rho_ij`` so the theoretical
correlation stays put.  Within a comparison row the same random substreams
are reused (common random numbers); moneyness levels reuse the same
log-returns with rescaled spots.

Moneyness is ``spot / (b * fixing)``: the spot over the strike of the
embedded down-and-in put.
"""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InfeasibleTargetError, LevyModelError, MisuseError
from .exotics import WPContract, payoff
from .models import AssetEconomy, LSParams, ModelSpec, theoretical_correlation, validate_domain
from .simulation import DateGrid, assemble_prices, resolve_seed, simulate_log_returns

REPORT_SCHEMA = "mvlevy.report/1"
CORRELATION_COLUMNS = ("T", "MN", "rho_Y", "price", "stderr", "pct_diff")
NONLINEAR_COLUMNS = ("T", "MN", "rho_Y", "a", "rho_ij", "price", "stderr", "pct_diff")


@dataclass(frozen=True)
class SensitivityGrid:
    maturities: tuple
    moneyness: tuple
    correlations: tuple
    a_grid: tuple = ()

    def __post_init__(self):
        for name in ("maturities", "moneyness", "correlations", "a_grid"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if not (self.maturities and self.moneyness and self.correlations):
            raise ValueError("maturity, moneyness and correlation grids must be non-empty")
        if any(t <= 0 for t in self.maturities) or any(m <= 0 for m in self.moneyness):
            raise ValueError("maturities and moneyness levels must be positive")
        if any(abs(r) > 1 for r in self.correlations):
            raise ValueError("correlation targets must lie in [-1, 1]")
        if any(a <= 0 for a in self.a_grid):
            raise ValueError("a-grid values must be positive")

    @classmethod
    def load(cls, path) -> "SensitivityGrid":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{exc.lineno}: {exc.msg}") from None
        return cls(d["maturities"], d["moneyness"], d["correlations"], d.get("a_grid", ()))

    def to_dict(self) -> dict:
        return {"maturities": list(self.maturities), "moneyness": list(self.moneyness),
                "correlations": list(self.correlations), "a_grid": list(self.a_grid)}


@dataclass
class SensitivityTable:
    name: str
    columns: tuple
    rows: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def column(self, key: str) -> np.ndarray:
        k = self.columns.index(key)
        return np.array([r[k] for r in self.rows], dtype=float)

    def __eq__(self, other):
        return (isinstance(other, SensitivityTable) and self.name == other.name
                and tuple(self.columns) == tuple(other.columns)
                and [list(r) for r in self.rows] == [list(r) for r in other.rows]
                and [dict(s) for s in self.skipped] == [dict(s) for s in other.skipped])


# ---------------------------------------------------------------------------
# dependence parameters
# ---------------------------------------------------------------------------


def _require_cls(model: ModelSpec):
    if model.family != "LS" or not model.constrained:
        raise MisuseError("dependence sensitivities are defined for constrained LS models")


def solve_rho_ij_for_target(model: ModelSpec, a: float, target: float, pair: tuple) -> float:
    """``rho_ij`` giving theoretical correlation ``target`` for pair ``(i, j)`` at common parameter ``a``.

    The correlation is ``a (A + rho_ij B) / D`` with ``A = mu_i mu_j kappa_i kappa_j``,
    ``B = sigma_i sigma_j sqrt(kappa_i kappa_j)`` and ``D`` the product of the
    marginal standard deviations, so the inversion is closed form.
    """
    _require_cls(model)
    i, j = pair
    p = model.params
    if i == j:
        raise ValueError("pair must name two different assets")
    probe = ModelSpec(LSParams(p.marginals, a, np.eye(p.n), p.variant))
    bad = [v for v in validate_domain(probe) if v.param == "a" or v.param.startswith("marginals")]
    if bad:
        raise InfeasibleTargetError("; ".join(str(v) for v in bad))
    mu, sigma, kappa = p.subordinated()
    big_a = mu[i] * mu[j] * kappa[i] * kappa[j]
    big_b = sigma[i] * sigma[j] * math.sqrt(kappa[i] * kappa[j])
    d = math.sqrt(p.marginals[i].variance() * p.marginals[j].variance())
    rho = (target * d / a - big_a) / big_b
    if abs(rho) > 1.0 + 1e-12:
        raise InfeasibleTargetError(
            f"rho_Y={target:g} at a={a:g} needs rho_{i}{j}={rho:.6g} outside [-1, 1]")
    return float(np.clip(rho, -1.0, 1.0))


def with_dependence(model: ModelSpec, a: float, target: float) -> tuple[ModelSpec, np.ndarray]:
    """Copy of ``model`` with common parameter ``a`` and every pairwise
    theoretical correlation equal to ``target``."""
    _require_cls(model)
    p = model.params
    rho = np.eye(p.n)
    for i in range(p.n):
        for j in range(i + 1, p.n):
            rho[i, j] = rho[j, i] = solve_rho_ij_for_target(model, a, target, (i, j))
    out = ModelSpec(LSParams(p.marginals, a, rho, p.variant))
    bad = validate_domain(out)
    if bad:
        raise InfeasibleTargetError("; ".join(str(v) for v in bad))
    return out, rho


# ---------------------------------------------------------------------------
# contracts at a given remaining life
# ---------------------------------------------------------------------------


def remaining_contract(contract: WPContract, maturity: float) -> WPContract:
    """The contract seen ``maturity`` years before its last date: earlier
    dates are dropped and the rest shifted so the last date is ``maturity``."""
    times = np.asarray(contract.grid.times)
    shift = times[-1] - maturity
    keep = times > shift + 1e-12
    if not keep.any():
        raise ValueError(f"no contract date within {maturity} years of maturity")

    def cut(vals):
        return None if vals is None else tuple(np.asarray(vals)[keep])

    return WPContract(contract.variant, DateGrid(tuple(times[keep] - shift)), contract.issue_price,
                      contract.coupon, contract.barrier, contract.fixings, cut(contract.coupon_barriers),
                      cut(contract.redemption_barriers))


def moneyness_spots(contract: WPContract, mn: float) -> np.ndarray:
    if not contract.barrier > 0:
        raise ValueError("moneyness needs a positive terminal barrier")
    return mn * contract.barrier * np.asarray(contract.fixings)


def _price(log_returns, economy, model, contract, mn, seed):
    spots = moneyness_spots(contract, mn)
    batch = assemble_prices(log_returns, economy, model, contract.grid, seed, spots)
    pay = np.asarray(payoff(batch.prices, contract, economy.rate)) / contract.issue_price
    se = float(np.std(pay, ddof=1) / math.sqrt(pay.size)) if pay.size > 1 and np.ptp(pay) > 0 else 0.0
    return float(np.mean(pay)), se


def _pct_diff(rows, group_cols, price_col):
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[c] for c in group_cols), []).append(r)
    for grp in groups.values():
        mean = float(np.mean([r[price_col] for r in grp]))
        for r in grp:
            r.append(100.0 * (r[price_col] / mean - 1.0) if mean != 0 else 0.0)


def _run(tasks, work, workers):
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(work, tasks))
    return [work(t) for t in tasks]


def correlation_sensitivity(contract: WPContract, economy: AssetEconomy, grid: SensitivityGrid,
                            template: ModelSpec, n_paths: int, seed: Optional[int] = None,
                            method: str = "rejection", workers: int = 1) -> SensitivityTable:
    """WP price per (T, MN, rho_Y) with ``a`` fixed at the template value.

    Only the Brownian correlation changes along a row, so reusing the seed
    gives exact common random numbers.  Infeasible targets are skipped.
    """
    _require_cls(template)
    seed = resolve_seed(seed)

    def work(task):
        t, rho_y = task
        try:
            model, _ = with_dependence(template, template.params.a, rho_y)
        except LevyModelError as exc:
            return [], [{"T": t, "MN": mn, "rho_Y": rho_y, "reason": str(exc)} for mn in grid.moneyness]
        c = remaining_contract(contract, t)
        y = simulate_log_returns(model, c.grid, n_paths, seed, method)
        return [[t, mn, rho_y, *_price(y, economy, model, c, mn, seed)] for mn in grid.moneyness], []

    tasks = [(t, r) for t in grid.maturities for r in grid.correlations]
    table = SensitivityTable("correlation", CORRELATION_COLUMNS)
    rows = []
    for got, skipped in _run(tasks, work, workers):
        rows += got
        table.skipped += skipped
    _pct_diff(rows, (0, 1), 3)
    table.rows = sorted(rows, key=lambda r: (grid.maturities.index(r[0]), grid.moneyness.index(r[1]),
                                             grid.correlations.index(r[2])))
    return table


def nonlinear_dependence_sensitivity(contract: WPContract, economy: AssetEconomy, grid: SensitivityGrid,
                                     template: ModelSpec, n_paths: int, seed: Optional[int] = None,
                                     method: str = "inverse", workers: int = 1) -> SensitivityTable:
    """WP price per (T, MN, rho_Y, a) with the theoretical correlation pinned at rho_Y.

    Subordinator draws use inverse-CDF sampling by default so that the same
    uniforms drive every ``a`` (exact common random numbers).  Combinations
    whose required ``rho_ij`` leaves ``[-1, 1]`` are skipped with a reason.
    """
    _require_cls(template)
    if not grid.a_grid:
        raise ValueError("the nonlinear study needs a non-empty a-grid")
    seed = resolve_seed(seed)

    def work(task):
        t, rho_y, a = task
        try:
            model, rho = with_dependence(template, a, rho_y)
        except LevyModelError as exc:
            return [], [{"T": t, "MN": mn, "rho_Y": rho_y, "a": a, "reason": str(exc)} for mn in grid.moneyness]
        c = remaining_contract(contract, t)
        y = simulate_log_returns(model, c.grid, n_paths, seed, method)
        return [[t, mn, rho_y, a, float(rho[0, 1]), *_price(y, economy, model, c, mn, seed)]
                for mn in grid.moneyness], []

    tasks = [(t, r, a) for t in grid.maturities for r in grid.correlations for a in grid.a_grid]
    table = SensitivityTable("nonlinear", NONLINEAR_COLUMNS)
    rows = []
    for got, skipped in _run(tasks, work, workers):
        rows += got
        table.skipped += skipped
    _pct_diff(rows, (0, 1, 2), 5)
    table.rows = sorted(rows, key=lambda r: (grid.maturities.index(r[0]), grid.moneyness.index(r[1]),
                                             grid.correlations.index(r[2]), grid.a_grid.index(r[3])))
    return table


def correlation_constancy(template: ModelSpec, table: SensitivityTable) -> float:
    """Largest deviation, over rows and asset pairs, of the theoretical
    correlation of the priced model from the row target."""
    worst = 0.0
    k_rho, k_a = table.columns.index("rho_Y"), table.columns.index("a")
    n = template.n_assets
    for r in table.rows:
        model, _ = with_dependence(template, r[k_a], r[k_rho])
        for i in range(n):
            for j in range(i + 1, n):
                worst = max(worst, abs(theoretical_correlation(model, i, j) - r[k_rho]))
    return worst


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def emit_report(tables: Sequence[SensitivityTable], out_dir) -> list:
    """Write each table as ``<name>.csv`` (header row, fixed column order)
    and ``<name>.json`` (columns, rows and skipped points).  Returns the paths."""
    paths = []
    os.makedirs(out_dir, exist_ok=True)
    for tab in tables:
        csv_path = os.path.join(out_dir, f"{tab.name}.csv")
        json_path = os.path.join(out_dir, f"{tab.name}.json")
        try:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(tab.columns)
                for r in tab.rows:
                    w.writerow([repr(float(v)) for v in r])
            with open(json_path, "w") as fh:
                json.dump({"schema": REPORT_SCHEMA, "name": tab.name, "columns": list(tab.columns),
                           "rows": [[float(v) for v in r] for r in tab.rows], "skipped": tab.skipped},
                          fh, indent=1)
        except OSError as exc:
            raise OSError(f"cannot write report under {out_dir}: {exc}") from exc
        paths += [csv_path, json_path]
    return paths


def read_report(path) -> SensitivityTable:
    """Parse a table written by ``emit_report`` (either the .json or the .csv file)."""
    path = str(path)
    if path.endswith(".json"):
        with open(path) as fh:
            d = json.load(fh)
        if d.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"{path}: unsupported report schema {d.get('schema')!r}")
        return SensitivityTable(d["name"], tuple(d["columns"]), [list(r) for r in d["rows"]], d["skipped"])
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    name = os.path.splitext(os.path.basename(path))[0]
    return SensitivityTable(name, tuple(rows[0]), [[float(v) for v in r] for r in rows[1:]])
