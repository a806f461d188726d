"""Worst-performance (WP) notes: payoffs and Monte Carlo prices.

Performances are ``P_j(t_i) = S_j(t_i) / S_j(t_0)`` and every event looks
only at the worst performer at each contract date (discrete monitoring).

* WP1 pays the coupon ``k`` at every date.
* WP2 pays it at ``t_i`` only when the worst performance is at least ``b_{d,i}``.
* WP3 adds memory (unpaid coupons are caught up) and autocall redemption
  at the first date with worst performance at least ``b_{r,i}``.

At maturity the holder receives ``I`` unless the worst performance is below
``b``, in which case the principal is scaled by that performance.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError
from .models import AssetEconomy, ModelSpec
from .simulation import DateGrid, PathBatch, simulate_paths

WP_VARIANTS = ("WP1", "WP2", "WP3")
CONTRACT_SCHEMA = "mvlevy.contract/1"


@dataclass(frozen=True)
class WPContract:
    variant: str
    grid: DateGrid
    issue_price: float
    coupon: float
    barrier: float
    fixings: tuple
    coupon_barriers: Optional[tuple] = None
    redemption_barriers: Optional[tuple] = None

    def __post_init__(self):
        if self.variant not in WP_VARIANTS:
            raise ContractError(f"variant must be one of {WP_VARIANTS}, got {self.variant!r}")
        m = self.grid.m
        if not self.issue_price > 0:
            raise ContractError("issue price must be positive")
        if self.coupon < 0:
            raise ContractError("coupon must be non-negative")
        if not self.barrier >= 0:
            raise ContractError("terminal barrier must be non-negative")
        fix = tuple(float(f) for f in self.fixings)
        if len(fix) < 1 or not all(f > 0 for f in fix):
            raise ContractError("fixings must be positive")
        object.__setattr__(self, "fixings", fix)
        for name, needed in (("coupon_barriers", self.variant in ("WP2", "WP3")),
                             ("redemption_barriers", self.variant == "WP3")):
            vals = getattr(self, name)
            if vals is None:
                if needed:
                    raise ContractError(f"{self.variant} needs {name}")
                continue
            vals = tuple(float(v) for v in vals)
            if len(vals) != m:
                raise ContractError(f"{name} needs one entry per date ({m}), got {len(vals)}")
            if not all(v >= 0 for v in vals):
                raise ContractError(f"{name} must be non-negative")
            object.__setattr__(self, name, vals)

    @property
    def n_assets(self) -> int:
        return len(self.fixings)

    def with_fixings(self, fixings) -> "WPContract":
        return WPContract(self.variant, self.grid, self.issue_price, self.coupon, self.barrier, tuple(fixings),
                          self.coupon_barriers, self.redemption_barriers)

    def to_dict(self) -> dict:
        return {
            "schema": CONTRACT_SCHEMA,
            "variant": self.variant,
            "dates": list(self.grid.times),
            "issue_price": self.issue_price,
            "coupon": self.coupon,
            "barrier": self.barrier,
            "fixings": list(self.fixings),
            "coupon_barriers": list(self.coupon_barriers) if self.coupon_barriers is not None else None,
            "redemption_barriers": list(self.redemption_barriers) if self.redemption_barriers is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WPContract":
        if d.get("schema", CONTRACT_SCHEMA) != CONTRACT_SCHEMA:
            raise ContractError(f"unsupported contract schema {d.get('schema')!r}")
        try:
            return cls(d["variant"], DateGrid(tuple(d["dates"])), float(d["issue_price"]), float(d["coupon"]),
                       float(d["barrier"]), tuple(d["fixings"]), d.get("coupon_barriers"),
                       d.get("redemption_barriers"))
        except KeyError as exc:
            raise ContractError(f"contract is missing field {exc}") from None
        except ValueError as exc:
            raise ContractError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "WPContract":
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ContractError(f"{path}:{exc.lineno}: {exc.msg}") from None


@dataclass(frozen=True)
class PricingResult:
    """MC price as a fraction of the issue price, with its standard error."""

    price: float
    stderr: float
    n_paths: int
    seed: int
    fingerprint: str = ""

    def to_dict(self) -> dict:
        return {"price": self.price, "stderr": self.stderr, "n_paths": self.n_paths, "seed": self.seed,
                "model": self.fingerprint}


def worst_performer(prices, fixings) -> tuple:
    """Index and value of the smallest performance ``S_j / S_j(t_0)``.

    Works on the last axis; ties resolve to the lowest index.
    """
    perf = np.asarray(prices, dtype=float) / np.asarray(fixings, dtype=float)
    w = np.argmin(perf, axis=-1)
    val = np.take_along_axis(perf, np.expand_dims(w, -1), axis=-1)[..., 0]
    if np.ndim(w) == 0:
        return int(w), float(val)
    return w, val


def _performances(prices, contract: WPContract) -> np.ndarray:
    prices = np.asarray(prices, dtype=float)
    if prices.ndim == 2:
        prices = prices[None]
    if prices.ndim != 3:
        raise ContractError("prices must have shape (n_paths, m, n_assets) or (m, n_assets)")
    _, m, n = prices.shape
    if m != contract.grid.m:
        raise ContractError(f"paths have {m} dates but the contract has {contract.grid.m}")
    if n != contract.n_assets:
        raise ContractError(f"paths have {n} assets but the contract has {contract.n_assets} fixings")
    return worst_performer(prices, contract.fixings)[1]


def _principal(worst_m, contract: WPContract) -> np.ndarray:
    return contract.issue_price * np.where(worst_m < contract.barrier, worst_m, 1.0)


def _squeeze(x, prices):
    return float(x[0]) if np.ndim(prices) == 2 else x


def wp1_payoff(prices, contract: WPContract, rate: float = 0.0):
    """Discounted WP1 payoff: ``k`` at every date plus the terminal leg."""
    worst = _performances(prices, contract)
    df = np.exp(-rate * np.asarray(contract.grid.times))
    out = contract.coupon * df.sum() + df[-1] * _principal(worst[:, -1], contract)
    return _squeeze(out, prices)


def wp2_payoff(prices, contract: WPContract, rate: float = 0.0):
    """Discounted WP2 payoff: ``k`` at ``t_i`` when ``P_{w_i}(t_i) >= b_{d,i}``, plus the terminal leg."""
    if contract.coupon_barriers is None:
        raise ContractError("WP2 payoff needs coupon barriers")
    worst = _performances(prices, contract)
    df = np.exp(-rate * np.asarray(contract.grid.times))
    paid = worst >= np.asarray(contract.coupon_barriers)
    out = contract.coupon * (paid * df).sum(axis=1) + df[-1] * _principal(worst[:, -1], contract)
    return _squeeze(out, prices)


def wp3_payoff(prices, contract: WPContract, rate: float = 0.0):
    """Discounted WP3 payoff following the per-date coupon / redemption loop.

    At each date: the coupon check (paying ``(c+1) k`` and resetting the
    memory counter ``c``, else incrementing it), then the redemption check
    (pay ``I`` and stop).  Paths never redeemed get the terminal leg.
    """
    if contract.coupon_barriers is None or contract.redemption_barriers is None:
        raise ContractError("WP3 payoff needs coupon and redemption barriers")
    worst = _performances(prices, contract)
    n_paths, m = worst.shape
    times = contract.grid.times
    total = np.zeros(n_paths)
    c = np.zeros(n_paths)
    alive = np.ones(n_paths, dtype=bool)
    for i in range(m):
        df = math.exp(-rate * times[i])
        p = worst[:, i]
        pay = alive & (p >= contract.coupon_barriers[i])
        total += np.where(pay, df * (c + 1.0) * contract.coupon, 0.0)
        c = np.where(pay, 0.0, c + 1.0)
        redeem = alive & (p >= contract.redemption_barriers[i])
        total += np.where(redeem, df * contract.issue_price, 0.0)
        alive &= ~redeem
    total += np.where(alive, math.exp(-rate * times[-1]) * _principal(worst[:, -1], contract), 0.0)
    return _squeeze(total, prices)


PAYOFFS = {"WP1": wp1_payoff, "WP2": wp2_payoff, "WP3": wp3_payoff}


def payoff(prices, contract: WPContract, rate: float = 0.0):
    return PAYOFFS[contract.variant](prices, contract, rate)


def price_paths(batch: PathBatch, contract: WPContract, rate: float) -> PricingResult:
    """Price a contract on already simulated paths."""
    if batch.grid.m != contract.grid.m or not np.allclose(batch.grid.times, contract.grid.times, rtol=0,
                                                               atol=1e-12):
        raise ContractError("path dates differ from the contract dates")
    pay = np.asarray(payoff(batch.prices, contract, rate)) / contract.issue_price
    n = pay.size
    if n > 1 and np.ptp(pay) > 0:
        stderr = float(np.std(pay, ddof=1) / math.sqrt(n))
    else:
        stderr = 0.0
    return PricingResult(float(np.mean(pay)), stderr, n, batch.seed, batch.fingerprint)


def price_wp(model: ModelSpec, contract: WPContract, economy: AssetEconomy, n_paths: int,
             seed: Optional[int] = None, method: str = "rejection") -> PricingResult:
    """Monte Carlo price of a WP note as a fraction of its issue price."""
    if economy.n != contract.n_assets:
        raise ContractError("economy and contract differ in the number of assets")
    batch = simulate_paths(model, economy, contract.grid, n_paths, seed, method)
    return price_paths(batch, contract, economy.rate)
