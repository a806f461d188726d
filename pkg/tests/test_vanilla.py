import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import variant_models
from mvlevy.errors import BracketError, NoSolutionError, TruncationRangeError
from mvlevy.models import AssetEconomy, marginal_exponent, martingale_correction, vg_exponent
from mvlevy.vanilla import (CosSettings, EuropeanOption, VolSurface, bs_price, cos_price, cos_prices, cumulants,
                            exponent_implied_vols, implied_vol, implied_vols, log_price_cf, model_implied_vols)


def bs_oracle(s, k, t, r, q, vol, kind):
    """Textbook Black-Scholes with math.erf, independent of the package."""
    d1 = (math.log(s / k) + (r - q + 0.5 * vol * vol) * t) / (vol * math.sqrt(t))
    d2 = d1 - vol * math.sqrt(t)
    n = lambda x: 0.5 * (1 + math.erf(x / math.sqrt(2)))
    if kind == "call":
        return s * math.exp(-q * t) * n(d1) - k * math.exp(-r * t) * n(d2)
    return k * math.exp(-r * t) * n(-d2) - s * math.exp(-q * t) * n(-d1)


class TestBlackScholes:
    def test_atm_reference_value(self):
        # frozen: S=K=100, T=1, r=q=0, vol=0.2
        assert bs_price(100.0, 100.0, 1.0, 0.0, 0.0, 0.2) == pytest.approx(7.965567455405804, abs=1e-12)

    @pytest.mark.parametrize("kind", ["call", "put"])
    def test_matches_erf_oracle(self, kind):
        for k in (60.0, 90.0, 100.0, 125.0):
            for t in (0.1, 1.0, 3.0):
                got = bs_price(100.0, k, t, 0.03, 0.01, 0.3, kind)
                assert got == pytest.approx(bs_oracle(100.0, k, t, 0.03, 0.01, 0.3, kind), abs=1e-11)

    def test_put_call_parity(self):
        c = bs_price(100.0, 110.0, 2.0, 0.04, 0.02, 0.25, "call")
        p = bs_price(100.0, 110.0, 2.0, 0.04, 0.02, 0.25, "put")
        assert c - p == pytest.approx(100 * math.exp(-0.04) - 110 * math.exp(-0.08), abs=1e-12)


class TestImpliedVol:
    def test_scalar_returns_float(self):
        v = implied_vol(bs_price(100.0, 100.0, 1.0, 0.0, 0.0, 0.2), 100.0, 100.0, 1.0)
        assert isinstance(v, float) and v == pytest.approx(0.2, abs=1e-12)

    def test_vectorised(self):
        k = np.array([80.0, 100.0, 120.0])
        vols = np.array([0.3, 0.2, 0.25])
        p = bs_price(100.0, k, 1.0, 0.01, 0.0, vols, "call")
        np.testing.assert_allclose(implied_vols(p, 100.0, k, 1.0, 0.01, 0.0), vols, atol=1e-10)

    def test_price_above_upper_bound_raises_no_solution(self):
        with pytest.raises(NoSolutionError) as err:
            implied_vols([5.0, 101.0], 100.0, 100.0, 1.0, 0.0, 0.0, "call")
        assert err.value.indices == [1]

    def test_price_below_intrinsic(self):
        with pytest.raises(NoSolutionError):
            implied_vol(15.0, 100.0, 80.0, 1.0)

    def test_vol_beyond_bracket(self):
        p = bs_price(100.0, 100.0, 1.0, 0.0, 0.0, 7.0)
        with pytest.raises(BracketError):
            implied_vol(p, 100.0, 100.0, 1.0)

    def test_error_modes(self):
        p = [bs_price(100.0, 100.0, 1.0, 0.0, 0.0, 0.2), 101.0]
        nan = implied_vols(p, 100.0, 100.0, 1.0, 0.0, 0.0, on_error="nan")
        assert nan[0] == pytest.approx(0.2) and np.isnan(nan[1])
        clip = implied_vols(p, 100.0, 100.0, 1.0, 0.0, 0.0, on_error="clip")
        assert clip[1] == 5.0

    def test_guess_does_not_change_answer(self):
        p = bs_price(100.0, 90.0, 0.5, 0.02, 0.0, 0.33, "put")
        for g in (0.1, 0.33, 2.0):
            assert implied_vols(p, 100.0, 90.0, 0.5, 0.02, 0.0, "put", guess=g) == pytest.approx(0.33, abs=1e-10)

    @settings(max_examples=150, deadline=None)
    @given(vol=st.floats(0.03, 2.0), k=st.floats(70.0, 140.0), t=st.floats(0.1, 5.0),
           kind=st.sampled_from(["call", "put"]))
    def test_round_trip_property(self, vol, k, t, kind):
        p = bs_price(100.0, k, t, 0.01, 0.0, vol, kind)
        d1 = (math.log(100 / k) + (0.01 + 0.5 * vol * vol) * t) / (vol * math.sqrt(t))
        vega = 100 * math.exp(-0.5 * d1 * d1) * math.sqrt(t / (2 * math.pi))
        if vega * 1e-9 < 64 * np.spacing(max(p, 100.0)):
            return  # price insensitive to vol at double precision
        assert implied_vol(p, 100.0, k, t, 0.01, 0.0, kind) == pytest.approx(vol, abs=1e-8)


class TestCos:
    @staticmethod
    def gaussian_cf(vol, r, q, t):
        return log_price_cf(lambda u: -0.5 * vol ** 2 * np.asarray(u) ** 2, r - q - 0.5 * vol ** 2, t)

    def test_cumulants_of_gaussian(self):
        c1, c2, c4 = cumulants(self.gaussian_cf(0.2, 0.05, 0.0, 2.0))
        assert c1 == pytest.approx((0.05 - 0.02) * 2.0, abs=1e-8)
        assert c2 == pytest.approx(0.08, rel=1e-6)
        assert c4 == pytest.approx(0.0, abs=1e-3)

    def test_cumulants_reject_bad_cf(self):
        with pytest.raises(TruncationRangeError):
            cumulants(lambda u: np.zeros_like(np.asarray(u, dtype=complex)))

    def test_gaussian_cos_equals_black_scholes(self):
        k = np.linspace(60, 150, 10)
        for kind in ("call", "put"):
            got = cos_prices(self.gaussian_cf(0.3, 0.02, 0.01, 1.5), 100.0, 0.02, 0.01, 1.5, k, kind)
            np.testing.assert_allclose(got, bs_price(100.0, k, 1.5, 0.02, 0.01, 0.3, kind), atol=1e-9)

    def test_single_option_wrapper(self):
        econ = AssetEconomy((100.0,), 0.02, (0.0,))
        cf = self.gaussian_cf(0.2, 0.02, 0.0, 1.0)
        got = cos_price(cf, econ, EuropeanOption(105.0, 1.0, "put"))
        assert got == pytest.approx(bs_price(100.0, 105.0, 1.0, 0.02, 0.0, 0.2, "put"), abs=1e-9)

    @staticmethod
    def vg_cf(mu, sigma, kappa, t):
        g = -vg_exponent(-1j, mu, sigma, kappa).real
        return log_price_cf(lambda u: vg_exponent(u, mu, sigma, kappa), 0.01 + g, t)

    def test_vg_smooth_density_converges(self):
        # t / kappa = 5: smooth density, geometric convergence
        cf = self.vg_cf(-0.1, 0.2, 0.2, 1.0)
        k = [90.0, 100.0, 110.0]
        ref = cos_prices(cf, 100.0, 0.01, 0.0, 1.0, k, "call", n_terms=4096)
        np.testing.assert_allclose(cos_prices(cf, 100.0, 0.01, 0.0, 1.0, k, "call"), ref, atol=1e-8)

    def test_vg_cusp_density_converges_monotonically(self):
        # t / kappa < 1: the density has a cusp, so convergence is algebraic
        cf = self.vg_cf(-0.15, 0.25, 1.6, 1.0)
        k = [90.0, 100.0, 110.0]
        ref = cos_prices(cf, 100.0, 0.01, 0.0, 1.0, k, "call", n_terms=8192)
        errs = [np.abs(cos_prices(cf, 100.0, 0.01, 0.0, 1.0, k, "call", n_terms=n) - ref).max()
                for n in (256, 512, 1024)]
        assert errs[0] < 5e-3 and errs[1] < errs[0] and errs[2] < errs[1]

    def test_vg_put_call_parity(self):
        model = variant_models()["cLS-VG"]
        g = martingale_correction(model, 0)
        cf = log_price_cf(lambda u: marginal_exponent(model, 0, u), 0.03 + g, 2.0)
        k = np.array([80.0, 100.0, 130.0])
        c = cos_prices(cf, 100.0, 0.03, 0.0, 2.0, k, "call")
        p = cos_prices(cf, 100.0, 0.03, 0.0, 2.0, k, "put")
        np.testing.assert_allclose(c - p, 100.0 - k * np.exp(-0.06), atol=1e-10)


def _surface(vols=None):
    k = list(np.linspace(80, 120, 5)) * 2
    t = [0.5] * 5 + [1.0] * 5
    return VolSurface("X", 100.0, t, k, vols if vols is not None else [0.2] * 10, [1.0] * 10, 0.01, 0.005)


class TestSurface:
    def test_dump_load_round_trip(self, tmp_path):
        s = _surface(np.linspace(0.15, 0.3, 10))
        s.dump(tmp_path / "s.csv")
        back = VolSurface.load(tmp_path / "s.csv")
        for name in ("maturities", "strikes", "vols", "weights"):
            np.testing.assert_array_equal(getattr(back, name), getattr(s, name))
        assert (back.asset, back.spot, back.rate, back.dividend) == ("X", 100.0, 0.01, 0.005)

    def test_load_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("# spot: 100\nmaturity,strike,vol,weight\n1,100,0.2,1\n1,110,abc,1\n")
        with pytest.raises(ValueError, match=":4:"):
            VolSurface.load(path)

    def test_rejects_duplicates_and_negative_weights(self):
        with pytest.raises(ValueError):
            VolSurface("X", 100.0, [1, 1], [100, 100], [0.2, 0.2], [1, 1])
        with pytest.raises(ValueError):
            VolSurface("X", 100.0, [1], [100], [0.2], [-1])

    def test_read_only(self):
        with pytest.raises(ValueError):
            _surface().vols[0] = 1.0

    def test_gaussian_exponent_recovers_flat_vol(self):
        vols = exponent_implied_vols(lambda u: -0.5 * 0.27 ** 2 * np.asarray(u) ** 2, -0.5 * 0.27 ** 2, _surface())
        np.testing.assert_allclose(vols, 0.27, atol=1e-9)

    def test_model_vols_show_skew(self):
        # negative mu gives a downward-sloping smile in strike
        vols = model_implied_vols(variant_models()["cLS-VG"], 0, _surface())
        assert vols[0] > vols[4] and vols[5] > vols[9]

    def test_bracket_error_carries_quote_context(self):
        with pytest.raises(BracketError, match=r"T=") as err:
            exponent_implied_vols(lambda u: -0.5 * 9.0 ** 2 * np.asarray(u) ** 2, -0.5 * 81.0, _surface(),
                                  CosSettings())
        assert err.value.indices


# ---------------------------------------------------------------------------
# worked examples and shape properties
# ---------------------------------------------------------------------------


def test_zero_vol_is_discounted_intrinsic():
    for k in (80.0, 100.0, 130.0):
        want = max(100 * math.exp(-0.01 * 2) - k * math.exp(-0.03 * 2), 0.0)
        assert bs_price(100.0, k, 2.0, 0.03, 0.01, 0.0, "call") == pytest.approx(want, abs=1e-12)


def test_deep_itm_call_tends_to_discounted_spot():
    cf = TestCos.gaussian_cf(0.2, 0.02, 0.01, 1.0)
    got = cos_prices(cf, 100.0, 0.02, 0.01, 1.0, [1e-3], "call")[0]
    assert got == pytest.approx(100 * math.exp(-0.01) - 1e-3 * math.exp(-0.02), abs=1e-6)


def test_round_trip_example():
    p = bs_price(100.0, 80.0, 0.5, 0.0, 0.0, 0.45, "call")
    assert implied_vol(p, 100.0, 80.0, 0.5) == pytest.approx(0.45, abs=1e-8)


def test_bs_increasing_in_vol():
    vols = np.linspace(0.01, 2.0, 50)
    assert np.all(np.diff(bs_price(100.0, 110.0, 1.0, 0.01, 0.0, vols, "call")) > 0)


def test_near_gaussian_vg_gives_flat_vols():
    from mvlevy.models import LSParams, ModelSpec, VGMarginal
    m = VGMarginal(0.0, 0.2, 1e-6)
    model = ModelSpec(LSParams([m, m], 0.5, np.eye(2), "cVG"))
    s = _surface()
    vols = model_implied_vols(model, 0, s)
    assert len(vols) == s.n_quotes
    np.testing.assert_allclose(vols, 0.2, atol=1e-3)


def test_zero_weight_quotes_are_evaluated():
    s = VolSurface("X", 100.0, [1.0, 1.0, 1.0], [90.0, 100.0, 110.0], [0.2] * 3, [1.0, 0.0, 1.0])
    vols = model_implied_vols(variant_models()["cLS-VG"], 0, s)
    assert vols.shape == (3,) and np.all(np.isfinite(vols))


@pytest.mark.parametrize("name", ["cLS-VG", "uLS-NIG", "cBB-VG", "uBB-NIG"])
def test_model_calls_monotone_and_convex_in_strike(name):
    model = variant_models()[name]
    g = martingale_correction(model, 0)
    cf = log_price_cf(lambda u: marginal_exponent(model, 0, u), 0.02 + g, 1.0)
    k = np.linspace(60, 160, 101)
    c = cos_prices(cf, 100.0, 0.02, 0.0, 1.0, k, "call")
    assert np.all(np.diff(c) <= 1e-6)
    assert np.all(np.diff(c, 2) >= -1e-6)
