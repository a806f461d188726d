"""European option pricing from characteristic functions (COS method),
Black-Scholes reference prices and implied volatility inversion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtr

from .errors import BracketError, NoSolutionError, TruncationRangeError
from .models import AssetEconomy, ModelSpec, marginal_exponent, martingale_correction, require_valid

VOL_LO, VOL_HI = 1e-4, 5.0


@dataclass(frozen=True)
class EuropeanOption:
    strike: float
    maturity: float
    kind: str = "call"

    def __post_init__(self):
        if not (self.strike > 0 and self.maturity > 0):
            raise ValueError("strike and maturity must be positive")
        if self.kind not in ("call", "put"):
            raise ValueError(f"kind must be 'call' or 'put', got {self.kind!r}")


@dataclass(frozen=True)
class CosSettings:
    n_terms: int = 256
    trunc_width: float = 10.0

    def __post_init__(self):
        if self.n_terms < 16:
            raise ValueError("n_terms must be at least 16")


@dataclass(frozen=True, eq=False)
class VolSurface:
    """Implied-volatility quotes of one asset plus its spot, rate and dividend yield."""

    asset: str
    spot: float
    maturities: np.ndarray
    strikes: np.ndarray
    vols: np.ndarray
    weights: np.ndarray
    rate: float = 0.0
    dividend: float = 0.0

    def __post_init__(self):
        arrs = {}
        for name in ("maturities", "strikes", "vols", "weights"):
            a = np.array(getattr(self, name), dtype=float).ravel()
            a.flags.writeable = False
            arrs[name] = a
            object.__setattr__(self, name, a)
        if len({a.size for a in arrs.values()}) != 1:
            raise ValueError("quote columns must have equal length")
        if not self.spot > 0:
            raise ValueError("spot must be positive")
        if np.any(self.maturities <= 0) or np.any(self.strikes <= 0):
            raise ValueError("maturities and strikes must be positive")
        if np.any(self.vols <= 0):
            raise ValueError("vols must be positive")
        if np.any(self.weights < 0) or not np.any(self.weights > 0):
            raise ValueError("weights must be non-negative with at least one positive")
        keys = set(zip(self.maturities.tolist(), self.strikes.tolist()))
        if len(keys) != self.maturities.size:
            raise ValueError("quotes must be unique by (maturity, strike)")

    @property
    def n_quotes(self) -> int:
        return self.maturities.size

    @property
    def economy(self) -> AssetEconomy:
        return AssetEconomy((self.spot,), self.rate, (self.dividend,))

    def with_vols(self, vols) -> "VolSurface":
        return VolSurface(self.asset, self.spot, self.maturities, self.strikes, vols, self.weights,
                          self.rate, self.dividend)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("# mvlevy.surface/1\n")
            fh.write(f"# asset: {self.asset}\n# spot: {self.spot!r}\n")
            fh.write(f"# rate: {self.rate!r}\n# dividend: {self.dividend!r}\n")
            fh.write("maturity,strike,vol,weight\n")
            for row in zip(self.maturities, self.strikes, self.vols, self.weights):
                fh.write(",".join(repr(float(x)) for x in row) + "\n")

    @classmethod
    def load(cls, path) -> "VolSurface":
        """Parse the surface text format; errors carry the offending line number."""
        meta, rows = {}, []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    if ":" in line:
                        k, v = line[1:].split(":", 1)
                        meta[k.strip()] = v.strip()
                    continue
                if line.lower().startswith("maturity"):
                    continue
                parts = line.split(",")
                if len(parts) != 4:
                    raise ValueError(f"{path}:{lineno}: expected 4 fields 'maturity,strike,vol,weight'")
                try:
                    rows.append([float(x) for x in parts])
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
        if "spot" not in meta:
            raise ValueError(f"{path}: header is missing 'spot'")
        if not rows:
            raise ValueError(f"{path}: no quotes")
        arr = np.array(rows)
        return cls(meta.get("asset", str(path)), float(meta["spot"]), arr[:, 0], arr[:, 1], arr[:, 2],
                   arr[:, 3], float(meta.get("rate", 0.0)), float(meta.get("dividend", 0.0)))


# ---------------------------------------------------------------------------
# Black-Scholes
# ---------------------------------------------------------------------------


def bs_price(spot, strike, maturity, rate, dividend, vol, kind="call"):
    """Black-Scholes price with continuous dividend yield (vectorised)."""
    spot, strike, maturity, vol = (np.asarray(x, dtype=float) for x in (spot, strike, maturity, vol))
    fwd_disc = spot * np.exp(-dividend * maturity)
    k_disc = strike * np.exp(-rate * maturity)
    sd = vol * np.sqrt(maturity)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = np.log(fwd_disc / k_disc) / sd + 0.5 * sd
    d1 = np.where(sd > 0, d1, np.where(fwd_disc > k_disc, np.inf, -np.inf))
    d2 = d1 - sd
    call = fwd_disc * ndtr(d1) - k_disc * ndtr(d2)
    put = call - fwd_disc + k_disc
    out = np.where(np.asarray(kind) == "put", np.maximum(put, 0.0), np.maximum(call, 0.0))
    return out[()] if out.ndim == 0 else out


def _bounds(spot, strike, maturity, rate, dividend, is_put):
    f = spot * np.exp(-dividend * maturity)
    k = strike * np.exp(-rate * maturity)
    lower = np.where(is_put, np.maximum(k - f, 0.0), np.maximum(f - k, 0.0))
    upper = np.where(is_put, k, f)
    return lower, upper


def _otm_value(f_disc, k_disc, sqrt_t, sig, is_put):
    sd = sig * sqrt_t
    d1 = np.log(f_disc / k_disc) / sd + 0.5 * sd
    call = f_disc * ndtr(d1) - k_disc * ndtr(d1 - sd)
    return np.where(is_put, call - f_disc + k_disc, call)


def implied_vols(prices, spot, strikes, maturities, rate, dividend, kinds="call",
                 on_error: str = "raise", guess=None, max_iter: int = 200):
    """Vectorised implied volatility by bracketed regula falsi (Illinois variant).

    The search bracket is ``[1e-4, 5]``.  ``guess`` (e.g. the market vol)
    seeds a narrower starting bracket where it brackets the root.
    ``on_error`` decides what happens to quotes without a root: ``"raise"``,
    ``"clip"`` (nearest bracket end) or ``"nan"``.
    """
    scalar = all(np.ndim(x) == 0 for x in (prices, spot, strikes, maturities, kinds))
    prices, spot, strikes, maturities = (np.array(a) for a in np.broadcast_arrays(
        *(np.atleast_1d(np.asarray(x, dtype=float)) for x in (prices, spot, strikes, maturities))))
    is_put = np.broadcast_to(np.asarray(kinds) == "put", prices.shape)
    lower, upper = _bounds(spot, strikes, maturities, rate, dividend, is_put)
    tol_p = 1e-13 * np.maximum(strikes * np.exp(-rate * maturities), spot)
    outside = (prices < lower - tol_p) | (prices > upper + tol_p)

    # invert the out-of-the-money side; in-the-money quotes go through parity
    f_disc = spot * np.exp(-dividend * maturities)
    k_disc = strikes * np.exp(-rate * maturities)
    sqrt_t = np.sqrt(maturities)
    otm_put = k_disc < f_disc
    target = np.where(is_put == otm_put, prices, prices - np.where(is_put, k_disc - f_disc, f_disc - k_disc))
    target = np.maximum(target, 0.0)
    ftol = 1e-14 * target + 4e-16 * prices

    def f(sig, sel):
        return _otm_value(f_disc[sel], k_disc[sel], sqrt_t[sel], sig, otm_put[sel]) - target[sel]

    out = np.full(prices.shape, np.nan)
    lo = np.full(prices.shape, VOL_LO)
    hi = np.full(prices.shape, VOL_HI)
    flo = f(lo, slice(None))
    fhi = f(hi, slice(None))

    below = ~outside & ((flo > 0) | (target <= 0))
    above = ~outside & ~below & (fhi < 0)
    if on_error == "raise":
        if np.any(outside):
            exc = NoSolutionError(f"price outside no-arbitrage bounds at quote(s) {np.flatnonzero(outside).tolist()}")
            exc.indices = np.flatnonzero(outside).tolist()
            raise exc
        if np.any(below | above):
            exc = BracketError(f"implied vol outside [{VOL_LO}, {VOL_HI}] at quote(s) "
                               f"{np.flatnonzero(below | above).tolist()}")
            exc.indices = np.flatnonzero(below | above).tolist()
            raise exc
    if on_error == "clip":
        out[below | (outside & (prices < lower))] = VOL_LO
        out[above | (outside & (prices > upper))] = VOL_HI

    active = ~(outside | below | above)
    out[active & (flo == 0)] = VOL_LO
    out[active & (fhi == 0)] = VOL_HI
    active &= (flo != 0) & (fhi != 0)

    if guess is not None and active.any():
        g = np.broadcast_to(np.asarray(guess, dtype=float), prices.shape)
        glo = np.clip(0.8 * g, VOL_LO, VOL_HI)
        ghi = np.clip(1.25 * g, VOL_LO, VOL_HI)
        fglo, fghi = f(glo, slice(None)), f(ghi, slice(None))
        ok = active & (glo < ghi) & (fglo < 0) & (fghi > 0)
        lo[ok], flo[ok], hi[ok], fhi[ok] = glo[ok], fglo[ok], ghi[ok], fghi[ok]

    side = np.zeros(prices.shape, dtype=int)
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        l, h, fl, fh = lo[idx], hi[idx], flo[idx], fhi[idx]
        x = (l * fh - h * fl) / (fh - fl)
        bad = ~((x > l) & (x < h))
        x[bad] = 0.5 * (l[bad] + h[bad])
        fx = f(x, idx)
        pos = fx > 0
        s = side[idx]
        # Illinois: halve the stale endpoint value when the same side moves twice
        hi[idx[pos]] = x[pos]
        fhi[idx[pos]] = fx[pos]
        flo[idx[pos & (s == 1)]] *= 0.5
        lo[idx[~pos]] = x[~pos]
        flo[idx[~pos]] = fx[~pos]
        fhi[idx[~pos & (s == -1)]] *= 0.5
        side[idx] = np.where(pos, 1, -1)
        done = (np.abs(fx) <= ftol[idx]) | (hi[idx] - lo[idx] <= 1e-14 * hi[idx])
        out[idx[done]] = x[done]
        active[idx[done]] = False
    if active.any():
        out[active] = 0.5 * (lo[active] + hi[active])
    return out[0] if scalar else out


def implied_vol(price, spot, strike, maturity, rate=0.0, dividend=0.0, kind="call") -> float:
    """Black-Scholes implied volatility of a single quote."""
    return float(implied_vols(price, spot, strike, maturity, rate, dividend, kind, on_error="raise"))


# ---------------------------------------------------------------------------
# COS method
# ---------------------------------------------------------------------------


def cumulants(cf: Callable, h: float = 1e-2) -> tuple[float, float, float]:
    """First, second and fourth cumulants from central differences of ``log cf``."""
    u = np.array([-2 * h, -h, 0.0, h, 2 * h])
    with np.errstate(all="ignore"):
        f = np.log(np.asarray(cf(u), dtype=complex))
    if not np.all(np.isfinite(f)):
        raise TruncationRangeError("log characteristic function not finite near the origin")
    c1 = ((f[3] - f[1]) / (2 * h)).imag
    c2 = -((f[3] - 2 * f[2] + f[1]) / h ** 2).real
    c4 = ((f[4] - 4 * f[3] + 6 * f[2] - 4 * f[1] + f[0]) / h ** 4).real
    if not (np.isfinite(c1) and np.isfinite(c2) and c2 > 0):
        raise TruncationRangeError(f"unusable cumulants c1={c1}, c2={c2}")
    return float(c1), float(c2), float(max(c4, 0.0))


def _put_coefficients(a: float, b: float, n_terms: int):
    """Cosine coefficients of the unit put payoff ``(1 - e^y)^+`` on ``[a, b]``."""
    k = np.arange(n_terms)
    u = k * np.pi / (b - a)
    d = min(b, 0.0)  # the payoff vanishes above y = 0
    if a >= d:
        return u, np.zeros(n_terms)
    # chi_k(a, d) and psi_k(a, d)
    w = u * (d - a)
    chi = (np.cos(w) * np.exp(d) - np.exp(a) + u * np.sin(w) * np.exp(d)) / (1.0 + u * u)
    psi = np.empty(n_terms)
    psi[0] = d - a
    psi[1:] = np.sin(w[1:]) / u[1:]
    return u, 2.0 / (b - a) * (psi - chi)


def cos_prices(cf: Callable, spot: float, rate: float, dividend: float, maturity: float, strikes,
               kinds="call", n_terms: int = 256, trunc_width: float = 10.0) -> np.ndarray:
    """COS prices for several strikes at one maturity.

    ``cf(u)`` is the characteristic function of ``log(S_T / S_0)`` under the
    pricing measure.  Puts are expanded directly; calls follow from put-call
    parity, which avoids the cancellation of the call series.
    """
    strikes = np.atleast_1d(np.asarray(strikes, dtype=float))
    c1, c2, c4 = cumulants(cf)
    x = np.log(spot / strikes)
    half = trunc_width * np.sqrt(c2 + np.sqrt(c4))
    a = c1 + x.min() - half
    b = c1 + x.max() + half
    if not (np.isfinite(a + b) and a < b):
        raise TruncationRangeError(f"bad truncation range [{a}, {b}]")
    u, v = _put_coefficients(a, b, n_terms)
    phi = np.asarray(cf(u), dtype=complex)
    phi[0] *= 0.5
    terms = (phi * v)[None, :] * np.exp(1j * np.outer(x - a, u))
    put = strikes * np.exp(-rate * maturity) * terms.real.sum(axis=1)
    call = put + spot * np.exp(-dividend * maturity) - strikes * np.exp(-rate * maturity)
    out = np.where(np.broadcast_to(np.asarray(kinds) == "put", strikes.shape), put, call)
    return np.maximum(out, 0.0)


def cos_price(cf: Callable, economy: AssetEconomy, option: EuropeanOption, n_terms: int = 256,
              trunc_width: float = 10.0, asset: int = 0) -> float:
    """COS price of one European option on ``asset`` of ``economy``."""
    return float(cos_prices(cf, economy.spots[asset], economy.rate, economy.dividends[asset], option.maturity,
                            [option.strike], option.kind, n_terms, trunc_width)[0])


def log_price_cf(exponent: Callable, drift: float, t: float) -> Callable:
    """CF of ``log(S_t/S_0) = drift t + Y(t)`` given the time-1 exponent of ``Y``."""
    return lambda u: np.exp(1j * np.asarray(u) * drift * t + t * exponent(u))


def exponent_implied_vols(exponent: Callable, g: float, surface: VolSurface,
                          settings: Optional[CosSettings] = None, on_error: str = "raise") -> np.ndarray:
    """Model vols for every quote of ``surface`` from a time-1 characteristic exponent.

    Each quote is priced as the out-of-the-money option (put below the
    forward, call above) and inverted with the same option kind.
    """
    settings = settings or CosSettings()
    prices = np.empty(surface.n_quotes)
    drift = surface.rate - surface.dividend + g
    fwd = surface.spot * np.exp((surface.rate - surface.dividend) * surface.maturities)
    kinds = np.where(surface.strikes < fwd, "put", "call")
    for t in np.unique(surface.maturities):
        sel = np.flatnonzero(surface.maturities == t)
        prices[sel] = cos_prices(log_price_cf(exponent, drift, t), surface.spot, surface.rate, surface.dividend,
                                 t, surface.strikes[sel], kinds[sel], settings.n_terms, settings.trunc_width)
    try:
        return implied_vols(prices, surface.spot, surface.strikes, surface.maturities, surface.rate,
                            surface.dividend, kinds, on_error=on_error, guess=surface.vols)
    except (NoSolutionError, BracketError) as exc:
        where = ", ".join(f"(T={surface.maturities[i]:g}, K={surface.strikes[i]:g})" for i in exc.indices)
        err = type(exc)(f"{surface.asset}: {str(exc).split(' at quote')[0]} at {where}")
        err.indices = exc.indices
        raise err from None


def model_implied_vols(model: ModelSpec, asset: int, surface: VolSurface,
                       economy: Optional[AssetEconomy] = None,
                       settings: Optional[CosSettings] = None) -> np.ndarray:
    """Black-Scholes vols of the model prices at every quote of ``surface``.

    Rate and dividend come from ``economy`` when given, else from the surface.
    """
    require_valid(model)
    if economy is not None:
        surface = VolSurface(surface.asset, economy.spots[asset], surface.maturities, surface.strikes,
                             surface.vols, surface.weights, economy.rate, economy.dividends[asset])
    g = martingale_correction(model, asset)
    return exponent_implied_vols(lambda u: marginal_exponent(model, asset, u), g, surface, settings)
