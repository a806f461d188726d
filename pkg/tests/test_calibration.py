import json

import numpy as np
import pytest

from conftest import RHO, VG_REP, exact_cbb_nig, exact_cbb_vg
from mvlevy.calibration import (SENTINEL, TRADEOFF_FLAG, CalibrationConfig, MarketCorrelations, calibrate,
                                fit_dependence_bb_constrained, fit_dependence_bb_penalized, fit_dependence_ls,
                                fit_marginal, fit_two_step, marginal_objective, parse_model_name, vol_rmse)
from mvlevy.models import LSParams, ModelSpec, NIGMarginal, VGMarginal, correlation_matrix, theoretical_correlation
from mvlevy.optimize import INFEASIBLE, DESettings
from mvlevy.vanilla import CosSettings, VolSurface, model_implied_vols

FAST = CalibrationConfig(de=DESettings(popsize=10, maxiter=40, seed=4))
MATS = [0.5] * 5 + [1.0] * 5
STRIKES = list(np.linspace(85, 115, 5)) * 2


def surfaces_for(model):
    out = []
    for j in range(model.n_assets):
        s = VolSurface(f"s{j}", 100.0, MATS, STRIKES, [0.2] * 10, [1.0] * 10, 0.01, 0.0)
        out.append(s.with_vols(model_implied_vols(model, j, s)))
    return out


@pytest.mark.parametrize("name, want", [("cls-vg", ("LS", "cVG")), ("uBB_NIG", ("BB", "uNIG")),
                                        ("cBB-NIG", ("BB", "cNIG"))])
def test_parse_model_name(name, want):
    assert parse_model_name(name) == want


def test_parse_model_name_rejects_unknown():
    with pytest.raises(ValueError, match="unknown model"):
        parse_model_name("cLS-CGMY")


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = CalibrationConfig(epsilon=0.05, escalation=(0.1, 0.3), de=DESettings(seed=9, mutation=(0.4, 0.9)))
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert CalibrationConfig.load(path) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            CalibrationConfig.from_dict({"epsilon": 0.1, "epsilom": 0.2})

    def test_bad_json_reports_line(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text('{\n "epsilon": 0.1,\n}\n')
        with pytest.raises(ValueError, match=":3:"):
            CalibrationConfig.load(path)

    @pytest.mark.parametrize("kw", [dict(epsilon=0.0), dict(h=-1.0), dict(bounds={"kappa": (0.0, 1.0)}),
                                    dict(bounds={"mu": (1.0, -1.0)})])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            CalibrationConfig(**kw)

    def test_partial_bounds_are_merged(self):
        cfg = CalibrationConfig(bounds={"kappa": (0.1, 2.0)})
        assert cfg.bounds["kappa"] == (0.1, 2.0) and "sigma" in cfg.bounds


class TestMarketCorrelations:
    def test_matrix_and_dict_round_trip(self, tmp_path):
        m = np.array([[1, 0.3, 0.2], [0.3, 1, -0.1], [0.2, -0.1, 1]])
        mc = MarketCorrelations.from_matrix(m)
        assert mc.keys() == [(0, 1), (0, 2), (1, 2)]
        path = tmp_path / "c.json"
        path.write_text(json.dumps(mc.to_dict()))
        assert MarketCorrelations.load(path) == mc

    def test_pairs_are_normalised(self):
        assert MarketCorrelations(2, {(1, 0): 0.4}).pairs == {(0, 1): 0.4}

    @pytest.mark.parametrize("pairs", [{(0, 0): 0.1}, {(0, 2): 0.1}, {(0, 1): 1.2}, {}])
    def test_invalid(self, pairs):
        with pytest.raises(ValueError):
            MarketCorrelations(2, pairs)

    def test_malformed_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"n_assets": 2}')
        with pytest.raises(ValueError, match="malformed"):
            MarketCorrelations.load(path)


def test_vol_rmse_is_weighted():
    s = VolSurface("x", 100.0, [1.0, 1.0], [90.0, 110.0], [0.2, 0.2], [3.0, 1.0])
    assert vol_rmse([0.21, 0.22], s) == pytest.approx(np.sqrt((3 * 1e-4 + 4e-4) / 4), rel=1e-12)


def test_marginal_objective_zero_at_truth_and_sentinel_outside():
    model = ModelSpec(LSParams([VG_REP, VG_REP], 0.5, RHO, "cVG"))
    s = surfaces_for(model)[0]
    assert marginal_objective(VG_REP, s) < 1e-20
    assert marginal_objective(model, s, 0) < 1e-20
    assert marginal_objective(VGMarginal(0.5, 0.8, 3.0), s) >= SENTINEL


def test_fit_marginal_recovers_vols():
    s = surfaces_for(ModelSpec(LSParams([VG_REP, VG_REP], 0.5, RHO, "cVG")))[0]
    fit = fit_marginal(s, "VG", CalibrationConfig(de=DESettings(popsize=12, maxiter=120, seed=1)))
    assert fit.optim.feasible
    assert fit.rmse < 5e-4


def test_fit_marginal_needs_three_quotes():
    s = VolSurface("x", 100.0, [1.0, 1.0], [90.0, 110.0], [0.2, 0.2], [1.0, 1.0])
    with pytest.raises(ValueError, match="three quotes"):
        fit_marginal(s, "VG")


class TestDependenceLS:
    def test_exact_targets_are_matched(self):
        margs = [VG_REP, VGMarginal(-0.1, 0.2, 1.2), VGMarginal(-0.05, 0.3, 0.9)]
        rho = np.array([[1, 0.6, 0.3], [0.6, 1, 0.5], [0.3, 0.5, 1]])
        truth = ModelSpec(LSParams(margs, 0.45, rho, "cVG"))
        fit = fit_dependence_ls(margs, MarketCorrelations.from_matrix(correlation_matrix(truth)), "cVG", FAST)
        assert fit.correlation_rmse < 1e-6
        assert fit.flags == []

    def test_unreachable_target_sets_tradeoff_flag(self):
        margs = [VGMarginal(0.0, 0.2, 2.5), VGMarginal(0.0, 0.2, 0.5)]
        fit = fit_dependence_ls(margs, MarketCorrelations(2, {(0, 1): 0.99}), "cVG", FAST)
        assert TRADEOFF_FLAG in fit.flags
        assert theoretical_correlation(fit.model, 0, 1) == pytest.approx(0.4 * np.sqrt(1.25), abs=1e-4)

    def test_rejects_other_variants(self):
        with pytest.raises(ValueError):
            fit_dependence_ls([VG_REP, VG_REP], MarketCorrelations(2, {(0, 1): 0.2}), "uVG")


class TestDependenceBB:
    def test_exact_build_is_feasible_with_small_residuals(self):
        truth = exact_cbb_vg()
        p = truth.params
        fit = fit_dependence_bb_constrained(p.target_marginals, MarketCorrelations.from_matrix(
            correlation_matrix(truth)), "cVG", epsilon=0.01)
        assert fit.optim.feasible
        assert fit.model is not None and max(abs(g) for g in fit.gaps.values()) < 0.01
        assert max(fit.residual_norms) <= 1e-6

    def test_unattainable_epsilon_reports(self):
        p = exact_cbb_vg().params
        fit = fit_dependence_bb_constrained(p.target_marginals, MarketCorrelations(2, {(0, 1): -0.5}), "cVG", FAST,
                                            epsilon=0.01)
        assert fit.optim.status == INFEASIBLE
        assert "larger epsilon" in fit.report


def test_two_step_rejects_unconstrained():
    model = ModelSpec(LSParams([VG_REP, VG_REP], 0.4, RHO, "uVG", alphas=(0.3, 0.5)))
    targets = MarketCorrelations(2, {(0, 1): 0.3})
    with pytest.raises(ValueError, match="joint"):
        fit_two_step(surfaces_for(model), targets, "uLS-VG")
    with pytest.raises(ValueError, match="joint required"):
        calibrate(surfaces_for(model), targets, "uLS-VG", procedure="two-step")
    with pytest.raises(ValueError, match="procedure"):
        calibrate(surfaces_for(model), targets, "uLS-VG", procedure="sideways")


@pytest.mark.slow
def test_ladder_escalates_to_joint_when_two_step_misses():
    # heterogeneous kappas cap the two-step correlation near 0.45, far from 0.9
    truth = ModelSpec(LSParams([VGMarginal(-0.1, 0.2, 2.5), VGMarginal(-0.1, 0.2, 0.5)], 0.3, RHO, "cVG"))
    msgs = []
    res = calibrate(surfaces_for(truth), MarketCorrelations(2, {(0, 1): 0.9}), "cLS-VG", FAST, log=msgs.append)
    assert msgs[0].startswith("two-step")
    assert any(m.startswith("escalated to joint") for m in msgs)
    assert res.procedure == "joint"
    assert res.flags[:len(msgs)] == msgs


# ---------------------------------------------------------------------------
# worked examples
# ---------------------------------------------------------------------------


def reference_objective(margin, surface):
    """Per-quote loop: COS price of the OTM option, then its Black-Scholes implied vol."""
    from mvlevy.vanilla import cos_prices, implied_vol, log_price_cf
    g = -margin.exponent(-1j).real
    total = 0.0
    for t, k, v, w in zip(surface.maturities, surface.strikes, surface.vols, surface.weights):
        fwd = surface.spot * np.exp((surface.rate - surface.dividend) * t)
        kind = "put" if k < fwd else "call"
        cf = log_price_cf(margin.exponent, surface.rate - surface.dividend + g, t)
        p = cos_prices(cf, surface.spot, surface.rate, surface.dividend, t, [k], kind, n_terms=8192)[0]
        total += w * (implied_vol(p, surface.spot, k, t, surface.rate, surface.dividend, kind) - v) ** 2
    return total / len(surface.vols)


def test_objective_matches_reference_loop():
    # both sides use enough COS terms that truncation choices no longer matter
    rng = np.random.default_rng(265)
    for _ in range(5):
        m = VGMarginal(rng.uniform(-0.3, 0.0), rng.uniform(0.1, 0.4), rng.uniform(0.1, 1.5))
        s = VolSurface("x", 100.0, MATS, STRIKES, rng.uniform(0.15, 0.35, 10), rng.uniform(0, 2, 10), 0.02, 0.01)
        got = marginal_objective(m, s, cos=CosSettings(n_terms=8192))
        assert got == pytest.approx(reference_objective(m, s), rel=1e-5)


def test_single_weight_objective():
    model = ModelSpec(LSParams([VG_REP, VG_REP], 0.5, RHO, "cVG"))
    exact = surfaces_for(model)[0]
    vols = exact.vols.copy()
    vols[3] += 0.01
    s = VolSurface("x", 100.0, MATS, STRIKES, vols, [0.0] * 3 + [1.0] + [0.0] * 6, 0.01, 0.0)
    assert marginal_objective(VG_REP, s) == pytest.approx(1e-4 / 10, rel=1e-6)


def test_zero_drift_dependence_exact_fit():
    margs = [VGMarginal(0.0, 0.2, 1.0)] * 2
    fit = fit_dependence_ls(margs, MarketCorrelations(2, {(0, 1): 0.3}), "cVG")
    p = fit.model.params
    assert p.a * p.rho[0, 1] == pytest.approx(0.3, abs=1e-8)
    assert fit.correlation_rmse < 1e-8


class TestPenalizedBB:
    truth = exact_cbb_vg()
    targets = MarketCorrelations.from_matrix(correlation_matrix(truth))

    def fit(self, h):
        p = self.truth.params
        return fit_dependence_bb_penalized(p.target_marginals, self.targets, "cVG", CalibrationConfig(h=h))

    def test_known_answer(self):
        f = self.fit(1.0)
        assert f.correlation_rmse ** 2 <= 1e-8 and max(f.residual_norms) ** 2 <= 1e-8

    def test_large_h_drives_residuals_to_zero(self):
        assert max(self.fit(1e4).residual_norms) < 1e-8

    def test_h_zero_fits_correlation_at_least_as_well(self):
        assert self.fit(0.0).correlation_rmse <= self.fit(1.0).correlation_rmse + 1e-12


def test_huge_epsilon_is_pure_residual_minimisation():
    p = exact_cbb_nig().params
    fit = fit_dependence_bb_constrained(p.target_marginals, MarketCorrelations(2, {(0, 1): 0.2}), "cNIG",
                                        epsilon=10.0)
    assert fit.optim.feasible and max(fit.residual_norms) < 1e-8


def test_impossible_correlation_reports_infeasible():
    p = exact_cbb_vg().params
    cfg = CalibrationConfig(bounds={"b": (0.01, 0.05), "sigma": (0.005, 0.01), "mu": (-0.01, 0.01)},
                            de=DESettings(maxiter=60))
    fit = fit_dependence_bb_constrained(p.target_marginals, MarketCorrelations(2, {(0, 1): 0.999}), "cVG", cfg,
                                        epsilon=0.01)
    assert fit.optim.status == INFEASIBLE and "consider a larger epsilon" in fit.report


@pytest.mark.slow
@pytest.mark.parametrize("margin", [VG_REP, NIGMarginal(-4.0, 0.16, 6.0)], ids=["VG", "NIG"])
def test_marginal_round_trip_two_smiles(margin):
    k = list(np.linspace(80, 120, 7)) * 2
    t = [0.5] * 7 + [1.0] * 7
    variant = "cVG" if isinstance(margin, VGMarginal) else "cNIG"
    model = ModelSpec(LSParams([margin, margin], 0.1, RHO, variant))
    s = VolSurface("x", 100.0, t, k, [0.2] * 14, [1.0] * 14, 0.01, 0.0)
    s = s.with_vols(model_implied_vols(model, 0, s))
    assert fit_marginal(s, variant).rmse <= 10e-4


@pytest.mark.slow
def test_flat_surface_pushes_kappa_down():
    k = list(np.linspace(80, 120, 7)) * 2
    s = VolSurface("x", 100.0, [0.5] * 7 + [1.0] * 7, k, [0.2] * 14, [1.0] * 14, 0.01, 0.0)
    fit = fit_marginal(s, "VG")
    assert fit.rmse <= 10e-4
    assert fit.marginal.kappa < 0.05


@pytest.mark.slow
def test_joint_beats_two_step_at_tradeoff_bound():
    truth = ModelSpec(LSParams([VGMarginal(-0.1, 0.2, 2.5), VGMarginal(-0.1, 0.2, 0.5)], 0.3, RHO, "cVG"))
    surfaces = surfaces_for(truth)
    targets = MarketCorrelations(2, {(0, 1): 0.9})
    cfg = CalibrationConfig(de=DESettings(maxiter=150, seed=7))
    two = fit_two_step(surfaces, targets, "cLS-VG", cfg)
    joint = calibrate(surfaces, targets, "cLS-VG", cfg, procedure="joint")
    assert TRADEOFF_FLAG in two.flags
    assert joint.max_gap < two.max_gap


@pytest.mark.slow
def test_uls_nig_joint_round_trip():
    truth = ModelSpec(LSParams([NIGMarginal(-4.0, 0.17, 5.8), NIGMarginal(-3.0, 0.2, 5.0)], 0.6, RHO, "uNIG",
                               alphas=(0.5, 0.7)))
    targets = MarketCorrelations.from_matrix(correlation_matrix(truth))
    res = calibrate(surfaces_for(truth), targets, "uLS-NIG", CalibrationConfig(epsilon=0.1, escalation=(0.2,)))
    assert res.max_gap < res.epsilon
    assert max(res.marginal_rmse) <= 15e-4
