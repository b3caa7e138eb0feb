import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import COV62, constant_hazard_params, make_patient

from icjm.likelihood import stack_parameters
from icjm.predict import (CurveSpanError, PredictionBudget, PredictionContext, RiskCurve, conditional_risk_from_curve,
                          cumulative_incidence, curve_grid, risk_at_visit_biopsy, risk_curve, risk_full,
                          risk_no_treatment, sample_effects_batch, sample_subject_effects)
from icjm.simulate import PRESET_PARAMETERS, PRESET_SPEC, SimulationParams, simulate_patient

SPEC = PRESET_SPEC
HP, HT = 0.3, 0.1
CONST = constant_hazard_params(HP, HT)


def _ctx(t_b=0.0, t_v=0.0, psa=((0.0, 5.0),), cov=COV62):
    hist = make_patient(psa=psa, t_upper=max(t_v, 0.5) + 1.0).longitudinal
    return PredictionContext(hist, t_b, t_v, max([t for t, _ in psa], default=0.0), cov)


def _full_closed(t_b, t_v, t_p, hp=HP, ht=HT):
    """Constant-hazard risk with treatment acting from ``t_v``, given event-free at ``t_b``."""
    s = hp + ht
    a = min(t_p, t_v)
    before = math.exp(-hp * t_b) - math.exp(-hp * a) if a > t_b else 0.0
    lo = max(t_b, t_v)
    after = hp / s * math.exp(ht * t_v) * (math.exp(-s * lo) - math.exp(-s * t_p)) if t_p > lo else 0.0
    return (before + after) / math.exp(-hp * t_b)


class TestContext:
    def test_ordering(self):
        with pytest.raises(ValueError):
            PredictionContext((), 2.0, 1.0, 1.0, COV62)

    def test_history_after_t_y(self):
        hist = make_patient(psa=((0.0, 1.0), (2.0, 1.0)), t_upper=3.0).longitudinal
        with pytest.raises(ValueError):
            PredictionContext(hist, 0.0, 0.0, 1.0, COV62)

    def test_from_patient_truncates(self):
        p = make_patient(psa=((0.0, 1.0), (0.5, 1.0), (1.0, 2.0)), t_upper=2.0)
        ctx = PredictionContext.from_patient(p, 0.0, 0.5)
        assert [o.time for o in ctx.history] == [0.0, 0.5]


class TestConstantHazardClosedForms:
    T_P = np.array([0.5, 1.0, 2.5, 6.0])

    def test_full_risk_from_zero(self):
        r = risk_full(_ctx(), self.T_P, CONST, L=3, n_mh=5, seed=1, spec=SPEC)
        expected = HP / (HP + HT) * (1 - np.exp(-(HP + HT) * self.T_P))
        np.testing.assert_allclose(r.draws, np.broadcast_to(expected, r.draws.shape), atol=1e-6)

    def test_full_risk_with_later_visit(self):
        t_p = np.array([2.0, 3.0, 7.0])
        r = risk_full(_ctx(0.5, 2.0, psa=((0.0, 5.0), (1.5, 5.0))), t_p, CONST, L=2, n_mh=5, seed=1, spec=SPEC)
        expected = [_full_closed(0.5, 2.0, t) for t in t_p]
        np.testing.assert_allclose(r.mean, expected, atol=1e-6)

    def test_full_risk_order(self):
        with pytest.raises(ValueError):
            risk_full(_ctx(0.0, 2.0), [1.0], CONST, L=2, n_mh=5, spec=SPEC)

    def test_no_treatment(self):
        r = risk_no_treatment(_ctx(1.0, 3.0), self.T_P[1:], CONST, L=2, n_mh=5, seed=2, spec=SPEC)
        np.testing.assert_allclose(r.mean, 1 - np.exp(-HP * (self.T_P[1:] - 1.0)), atol=1e-6)

    def test_visit_biopsy(self):
        t_b = 2.0
        t_p = np.array([2.0, 3.0, 9.0])
        r = risk_at_visit_biopsy(_ctx(t_b, t_b), t_p, CONST, L=2, n_mh=5, seed=3, spec=SPEC)
        s = HP + HT
        expected = HP / s * (math.exp(-s * t_b) - np.exp(-s * t_p)) / math.exp(-s * t_b)
        np.testing.assert_allclose(r.mean, expected, atol=1e-6)
        assert r.mean[0] == 0.0

    def test_visit_biopsy_needs_equal_times(self):
        with pytest.raises(ValueError):
            risk_at_visit_biopsy(_ctx(0.0, 1.0), [2.0], CONST, L=2, n_mh=5, spec=SPEC)

    def test_conditional_risk_is_memoryless(self):
        curve = risk_curve(_ctx(), CONST, 10.0, budget=PredictionBudget(2, 5, 2, 1), spec=SPEC)
        got = conditional_risk_from_curve(curve, 3.0, 5.5)
        assert got == pytest.approx(1 - math.exp(-HP * 2.5), abs=1e-6)


class TestReductions:
    def test_without_treatment_full_equals_no_treatment(self):
        draws = stack_parameters([SimulationParams(treatment=False).effective_model()] * 4)
        u = np.random.default_rng(0).normal(scale=0.3, size=(4, 4))
        cov = COV62
        t = np.linspace(1.0, 9.0, 9)
        full = cumulative_incidence(draws, u, cov, SPEC, 1.0, 1.0, t, treatment=True)
        none = cumulative_incidence(draws, u, cov, SPEC, 1.0, 1.0, t, treatment=False)
        np.testing.assert_allclose(full, none, atol=1e-10)

    def test_visit_biopsy_identity(self):
        p = stack_parameters([PRESET_PARAMETERS] * 3)
        u = np.random.default_rng(1).normal(scale=0.3, size=(3, 4))
        t = np.array([2.0, 2.5, 4.0, 7.0])
        via_visit = cumulative_incidence(p, u, COV62, SPEC, 2.0, 2.0, t)
        ctx = _ctx(2.0, 2.0)
        r = risk_at_visit_biopsy(ctx, t, p, n_mh=20, seed=9, spec=SPEC)
        r_full = risk_full(ctx, t, p, n_mh=20, seed=9, spec=SPEC)
        np.testing.assert_allclose(r.draws, r_full.draws, atol=1e-12)
        assert via_visit.shape == (3, 4)

    def test_closed_form_and_nested_routes_agree(self):
        p = stack_parameters([PRESET_PARAMETERS] * 3)
        u = np.random.default_rng(2).normal(scale=0.4, size=(3, 4))
        t = np.array([1.2, 2.0, 3.7, 6.5, 10.0])
        a = cumulative_incidence(p, u, COV62, SPEC, 1.0, 1.0, t, treatment=False, closed_form=True)
        b = cumulative_incidence(p, u, COV62, SPEC, 1.0, 1.0, t, treatment=False, closed_form=False)
        # The nested route integrates the density, the closed form the hazard; both are GK15-accurate.
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_empty_interval_is_zero(self):
        r = risk_full(_ctx(1.0, 1.0), [1.0], PRESET_PARAMETERS, L=2, n_mh=5, seed=1, spec=SPEC)
        assert r.mean[0] == 0.0

    def test_unsorted_times(self):
        p = stack_parameters([PRESET_PARAMETERS])
        t = np.array([5.0, 2.0, 8.0])
        a = cumulative_incidence(p, np.zeros(4), COV62, SPEC, 0.0, 1.0, t)
        b = cumulative_incidence(p, np.zeros(4), COV62, SPEC, 0.0, 1.0, np.sort(t))
        np.testing.assert_allclose(a[0], b[0][[1, 0, 2]], atol=1e-15)

    def test_large_time_approaches_one(self):
        p = constant_hazard_params(0.2, 0.1)
        t = np.array([5.0, 20.0, 60.0, 200.0])
        v = cumulative_incidence(stack_parameters([p]), np.zeros(4), COV62, SPEC, 0.0, 0.0, t, treatment=False)[0]
        assert np.all(np.diff(v) > 0) and v[-1] == pytest.approx(1.0, abs=1e-12)


class TestRandomEffects:
    def test_prior_recovery_without_data(self):
        ctx = PredictionContext((), 0.0, 0.0, 0.0, COV62)
        draws = stack_parameters([PRESET_PARAMETERS] * 10_000)
        u = sample_effects_batch(ctx, draws, SPEC, True, n_mh=250, seed=4)
        cov = np.cov(u.T)
        om = PRESET_PARAMETERS.Omega
        np.testing.assert_allclose(np.diag(cov), np.diag(om), rtol=0.1)
        assert np.linalg.norm(cov - om) / np.linalg.norm(om) < 0.1

    def test_conditioning_on_visit_irrelevant_without_treatment(self):
        model = SimulationParams(treatment=False).effective_model()
        draws = stack_parameters([model] * 20)
        ctx = _ctx(1.0, 3.0, psa=((0.0, 4.0), (1.0, 5.0), (2.5, 6.5)))
        on = sample_effects_batch(ctx, draws, SPEC, True, n_mh=60, seed=5)
        off = sample_effects_batch(ctx, draws, SPEC, False, n_mh=60, seed=5)
        np.testing.assert_allclose(on, off, atol=1e-12)

    def test_single_draw_wrapper(self):
        ctx = _ctx(0.0, 0.0, psa=((0.0, 4.0), (0.5, 5.0)))
        a = sample_subject_effects(ctx, PRESET_PARAMETERS, False, 50, seed=6, spec=SPEC)
        b = sample_effects_batch(ctx, stack_parameters([PRESET_PARAMETERS]), SPEC, False, 50, seed=6)[0]
        np.testing.assert_array_equal(a, b)

    def test_calibration_against_known_effects(self):
        params = SimulationParams()
        hits, total = 0, 0
        draws = stack_parameters([params.effective_model()] * 300)
        for i in range(12):
            sim = simulate_patient(params, 100 + i, f"c{i}")
            rec = sim.history_until(5.0)
            ctx = PredictionContext.from_patient(rec, 0.0, 0.0, 5.0)
            u = sample_effects_batch(ctx, draws, SPEC, False, n_mh=250, seed=i)
            lo, hi = np.percentile(u, [2.5, 97.5], axis=0)
            hits += int(np.sum((lo <= sim.true_u) & (sim.true_u <= hi)))
            total += sim.true_u.size
        assert hits / total >= 0.8

    def test_non_finite_start(self):
        bad = PRESET_PARAMETERS.copy()
        bad.tau_eps = np.asarray(np.nan)
        with pytest.raises(ValueError):
            sample_effects_batch(_ctx(), stack_parameters([bad]), SPEC, False, 5, seed=0)


@pytest.fixture(scope="module")
def rich_curve():
    ctx = _ctx(1.0, 1.5, psa=((0.0, 5.0), (0.5, 5.5), (1.0, 6.4), (1.5, 7.2)), cov=COV62)
    draws = stack_parameters([PRESET_PARAMETERS] * 60)
    budget = PredictionBudget(60, 120, 40, 11)
    return ctx, draws, budget, risk_curve(ctx, draws, 10.0, budget=budget, spec=SPEC)


class TestRiskCurve:
    def test_invariants(self, rich_curve):
        _, _, _, c = rich_curve
        assert np.all((c.draws >= 0) & (c.draws <= 1))
        assert np.all(np.diff(c.draws, axis=1) >= -1e-15)
        assert np.all(c.draws[:, 0] == 0.0) and c.grid[0] == 1.0
        assert np.all(c.lower <= c.mean + 1e-15) and np.all(c.mean <= c.upper + 1e-15)

    def test_grid_contains_visits(self):
        grid, breaks = curve_grid(1.2, 10.0)
        np.testing.assert_allclose(breaks, np.r_[1.2, np.arange(1.5, 10.01, 0.5)])
        assert grid.size == breaks.size + 15 * (breaks.size - 1)

    def test_conditional_matches_recomputation(self, rich_curve):
        ctx, draws, budget, c = rich_curve
        u = sample_effects_batch(ctx, draws, SPEC, False, budget.n_mh, budget.warmup, budget.seed)
        for tt, te in ((1.0, 4.0), (2.5, 6.0), (4.0, 9.5)):
            direct = cumulative_incidence(draws, u, ctx.covariates, SPEC, tt, tt, [te], treatment=False)[:, 0]
            # Matched draws: only the quadrature panels differ between the two routes.
            assert conditional_risk_from_curve(c, tt, te) == pytest.approx(direct.mean(), abs=1e-6)

    def test_conditional_limits(self, rich_curve):
        _, _, _, c = rich_curve
        assert conditional_risk_from_curve(c, 1.0, 5.0) == pytest.approx(c.mean_at(5.0), abs=1e-15)
        assert conditional_risk_from_curve(c, 3.0, 3.0) == 0.0

    def test_conditional_errors(self, rich_curve):
        _, _, _, c = rich_curve
        with pytest.raises(CurveSpanError):
            conditional_risk_from_curve(c, 2.0, 11.0)
        with pytest.raises(ValueError):
            conditional_risk_from_curve(c, 0.5, 3.0)

    def test_doubling_draws_consistent(self, rich_curve):
        ctx, _, _, c = rich_curve
        big = risk_curve(ctx, stack_parameters([PRESET_PARAMETERS] * 120), 10.0,
                         budget=PredictionBudget(120, 120, 40, 12), spec=SPEC)
        i = np.searchsorted(c.grid, 6.0)
        mcse = math.hypot(c.draws[:, i].std() / math.sqrt(60), big.draws[:, i].std() / math.sqrt(120))
        assert abs(c.mean[i] - big.mean[i]) < 2 * mcse

    def test_export(self, rich_curve, tmp_path):
        _, _, _, c = rich_curve
        lines = c.to_csv(tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "t_p,mean,lower,upper" and len(lines) == c.grid.size + 1
        env = json.loads(c.to_json(tmp_path / "c.json").read_text())
        assert env["t_b"] == 1.0 and env["n_draws"] == 60 and env["budget"]["seed"] == 11

    def test_from_function(self):
        c = RiskCurve.from_function(lambda t: 1 - np.exp(-0.2 * (t - 2.0)), 2.0, 10.0)
        assert c.mean_at(2.0) == 0.0
        assert c.integrate_mean(2.0, 10.0) == pytest.approx(8 - (1 - math.exp(-1.6)) / 0.2, rel=1e-6)

    def test_random_posterior_needs_spec(self):
        with pytest.raises(ValueError):
            risk_full(_ctx(), [1.0], PRESET_PARAMETERS, L=2, n_mh=5)


@given(st.floats(0.0, 4.0), st.floats(0.0, 3.0), st.lists(st.floats(0.0, 6.0), min_size=1, max_size=6),
       st.lists(st.floats(-1.0, 1.0), min_size=4, max_size=4))
def test_per_draw_risk_bounded_and_monotone(t_b, gap, offsets, u):
    t_v = t_b + gap
    t = np.sort(t_v + np.array(offsets))
    v = cumulative_incidence(stack_parameters([PRESET_PARAMETERS]), np.array(u), COV62, SPEC, t_b, t_v, t)[0]
    assert np.all((v >= 0) & (v <= 1))
    assert np.all(np.diff(v) >= -1e-12)
