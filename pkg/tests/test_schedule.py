import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import COV62, EXAMPLE_CURVE_YEAR2, EXAMPLE_CURVE_YEAR3, constant_hazard_params, piecewise_hazard_cdf
from oracles import replay_schedule, sample_from_curve

from icjm.predict import PredictionBudget, PredictionContext, RiskCurve
from icjm.schedule import (DEFAULT_PHI_GRID, BiopsySchedule, Decision, UndefinedMetricError, VisitGrid,
                           decide_current_visit, expected_dd, expected_nb, expected_progression_time,
                           generate_schedule, optimal_threshold, optimize_threshold_on_curve, plan_schedule,
                           schedule_metrics)
from icjm.simulate import PRESET_SPEC

GRID = VisitGrid.regular(0.5, 10.0)
ANNUAL = BiopsySchedule(0.0, tuple(float(t) for t in range(1, 11)))


def _curve(cdf, t_b=0.0, horizon=10.0):
    return RiskCurve.from_function(cdf, t_b, horizon)


def _example(d):
    return _curve(piecewise_hazard_cdf(d["t_b"], d["breaks"], d["rates"]), d["t_b"])


def _exp_cdf(rate, t_b=0.0):
    return lambda t: -np.expm1(-rate * (np.asarray(t) - t_b))


class TestDecision:
    @pytest.mark.parametrize("risk,expected", [(0.08, Decision.DEFER), (0.11, Decision.BIOPSY),
                                               (0.1, Decision.BIOPSY)])
    def test_threshold_rule(self, risk, expected):
        assert decide_current_visit(risk, 0.1) is expected

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_total_and_pure(self, r, phi):
        d = decide_current_visit(r, phi)
        assert d is decide_current_visit(r, phi)
        assert (d is Decision.BIOPSY) == (r >= phi)


class TestVisitGrid:
    def test_regular(self):
        assert GRID.times[:3] == (0.0, 0.5, 1.0) and GRID.horizon == 10.0 and len(GRID.times) == 21

    @pytest.mark.parametrize("times", [(), (1.0, 1.0), (-1.0, 0.0)])
    def test_invalid(self, times):
        with pytest.raises(ValueError):
            VisitGrid(times)


class TestPlanning:
    def test_worked_example_at_year_two(self):
        curve = _example(EXAMPLE_CURVE_YEAR2)
        s = plan_schedule(curve, GRID, 0.1, t_v=2.0)
        assert s.planned_times == (2.5, 5.5, 7.5, 10.0)
        first = dict((t, r) for t, r, _ in s.trace)
        assert round(first[2.0], 2) == 0.08 and round(first[2.5], 2) == 0.11

    def test_worked_example_after_update(self):
        s = plan_schedule(_example(EXAMPLE_CURVE_YEAR3), GRID, 0.1, t_v=3.0)
        assert s.planned_times == (6.0, 8.0, 10.0)

    def test_threshold_one_gives_horizon_only(self):
        s = plan_schedule(_curve(_exp_cdf(0.3)), GRID, 1.0)
        assert s.planned_times == (10.0,)

    def test_zero_threshold_biopsies_every_visit(self):
        s = plan_schedule(_curve(_exp_cdf(0.3)), GRID, 0.0)
        assert s.planned_times == GRID.times[1:]

    def test_visit_off_grid(self):
        with pytest.raises(ValueError):
            plan_schedule(_curve(_exp_cdf(0.3)), GRID, 0.1, t_v=1.3)

    def test_curve_shorter_than_horizon(self):
        with pytest.raises(ValueError):
            plan_schedule(_curve(_exp_cdf(0.3), horizon=8.0), GRID, 0.1)

    @given(st.lists(st.floats(0.0, 0.6), min_size=4, max_size=4), st.floats(0.01, 0.5), st.floats(0.01, 0.5),
           st.floats(0.0, 4.0))
    def test_monotone_thinning_and_shape(self, rates, phi_a, phi_b, t_b):
        t_b = round(t_b * 2) / 2
        cdf = piecewise_hazard_cdf(t_b, np.linspace(t_b, 10.0, 5)[1:4], rates)
        curve = _curve(cdf, t_b)
        lo, hi = sorted((phi_a, phi_b))
        s_lo, s_hi = plan_schedule(curve, GRID, lo), plan_schedule(curve, GRID, hi)
        assert len(s_hi) <= len(s_lo)
        for s in (s_lo, s_hi):
            assert s.planned_times[-1] == 10.0
            assert all(b > a for a, b in zip(s.planned_times[:-1], s.planned_times[1:]))
            assert all(GRID.contains(t) for t in s.planned_times)

    def test_generate_schedule_from_posterior(self):
        ctx = PredictionContext((), 0.0, 0.0, 0.0, COV62)
        s = generate_schedule(ctx, GRID, 0.1, constant_hazard_params(0.05, 0.01), PredictionBudget(2, 5, 2, 1),
                              spec=PRESET_SPEC)
        # 1 - exp(-0.05 * 2.5) = 0.1175 is the first crossing on the 6-month grid.
        assert s.planned_times == (2.5, 5.0, 7.5, 10.0)

    def test_to_dict(self):
        s = plan_schedule(_example(EXAMPLE_CURVE_YEAR3), GRID, 0.1, t_v=3.0)
        d = json.loads(json.dumps(s.to_dict()))
        assert d["planned_times"] == [6.0, 8.0, 10.0] and d["trace"][0]["t"] == 3.5


class TestExpectedMetrics:
    def test_single_biopsy(self):
        s = BiopsySchedule(0.5, (10.0,))
        assert expected_nb(s, _curve(_exp_cdf(0.2))) == pytest.approx(1.0, abs=1e-15)

    def test_equal_split(self):
        c = _curve(lambda t: np.asarray(t) / 10.0)
        assert expected_nb(BiopsySchedule(0.5, (5.0, 10.0)), c) == pytest.approx(1.5, abs=1e-12)

    def test_uniform_mass_gives_half_intervals(self):
        c = _curve(lambda t: np.asarray(t) / 10.0)
        s = BiopsySchedule(0.5, (2.0, 5.0, 10.0))
        expected = 0.2 * 1.0 + 0.3 * 1.5 + 0.5 * 2.5
        assert expected_dd(s, c) == pytest.approx(expected, abs=1e-10)

    def test_uniform_midpoint(self):
        c = _curve(lambda t: np.asarray(t) / 10.0)
        assert expected_progression_time(c, 2.0, 5.0) == pytest.approx(3.5, abs=1e-12)

    def test_truncated_exponential(self):
        c = _curve(_exp_cdf(0.5), 0.0, 2.0)
        h, b = 0.5, 2.0
        expected = 1 / h - b * math.exp(-h * b) / (1 - math.exp(-h * b))
        assert expected_progression_time(c, 0.0, 2.0) == pytest.approx(expected, abs=1e-4)

    def test_mass_at_right_endpoint(self):
        c = _curve(lambda t: np.where(np.asarray(t) >= 4.999, 1.0, 0.0))
        assert expected_progression_time(c, 4.5, 5.0) == pytest.approx(5.0, abs=0.02)

    def test_point_mass_at_biopsy_gives_zero_delay(self):
        c = _curve(lambda t: (np.asarray(t) >= 3.0).astype(float))
        s = BiopsySchedule(0.5, (3.0, 10.0))
        assert expected_dd(s, c) == pytest.approx(0.0, abs=1e-12)
        assert expected_nb(s, c) == pytest.approx(1.0, abs=1e-12)

    def test_zero_mass(self):
        c = _curve(lambda t: np.zeros_like(np.asarray(t)))
        with pytest.raises(UndefinedMetricError):
            expected_nb(ANNUAL, c)
        with pytest.raises(UndefinedMetricError):
            expected_progression_time(c, 1.0, 2.0)
        m = schedule_metrics(ANNUAL, c)
        assert (m.expected_nb, m.expected_dd, m.loss) == (1.0, 0.0, 0.0)

    def test_bounds(self):
        m = schedule_metrics(ANNUAL, _curve(_exp_cdf(0.2)))
        assert 1.0 <= m.expected_nb <= len(ANNUAL)
        assert 0.0 <= m.expected_dd <= 1.0
        assert m.loss == pytest.approx(math.hypot(m.expected_nb - 1, m.expected_dd))


def monte_carlo_metrics(cdf, planned, t_b=0.0, n=1_000_000, seed=0):
    T = sample_from_curve(cdf, t_b, planned[-1], n, np.random.default_rng(seed))
    nb, dd = replay_schedule(T, planned)
    return nb.mean(), dd.mean(), nb.std() / math.sqrt(n), dd.std() / math.sqrt(n)


ANALYTIC_CURVES = {
    "exponential": _exp_cdf(0.2),
    "weibull": lambda t: -np.expm1(-(np.asarray(t) / 6.0) ** 2.5),
    "piecewise": piecewise_hazard_cdf(0.0, (3.0, 6.0), (0.05, 0.3, 0.1)),
}
SCHEDULES = {
    "annual": ANNUAL.planned_times,
    "pass": (1.0, 2.0, 4.0, 6.0, 8.0, 10.0),
    "irregular": (1.5, 2.0, 5.5, 9.0, 10.0),
}


@pytest.mark.parametrize("curve_name", sorted(ANALYTIC_CURVES))
@pytest.mark.parametrize("sched_name", sorted(SCHEDULES))
def test_metrics_match_monte_carlo_replay(curve_name, sched_name):
    cdf = ANALYTIC_CURVES[curve_name]
    planned = SCHEDULES[sched_name]
    s = BiopsySchedule(0.1, planned)
    c = _curve(cdf)
    nb, dd, se_nb, se_dd = monte_carlo_metrics(cdf, planned)
    for got, mc, se in ((expected_nb(s, c), nb, se_nb), (expected_dd(s, c), dd, se_dd)):
        assert abs(got - mc) <= 0.01
        assert abs(got - mc) <= 3 * se


def exhaustive_choice(cdf, t_b=0.0, max_dd=None):
    """Independent grid search: own planning loop and Monte Carlo-free closed-form metrics."""
    best = None
    for phi in DEFAULT_PHI_GRID:
        planned, last = [], t_b
        for t in GRID.times:
            if t <= last or t >= GRID.horizon:
                continue
            F = cdf(np.array([last, t]))
            if (F[1] - F[0]) / (1 - F[0]) >= phi:
                planned.append(t)
                last = t
        planned.append(GRID.horizon)
        edges = np.r_[t_b, planned]
        F = cdf(edges)
        p = np.diff(F) / (F[-1] - F[0])
        nb = float(np.sum(np.arange(1, p.size + 1) * p))
        dd = 0.0
        for g in range(p.size):
            x = np.linspace(edges[g], edges[g + 1], 20_001)
            Fx = cdf(x)
            mass = Fx[-1] - Fx[0]
            if mass > 0:
                et = edges[g] + np.trapezoid((Fx[-1] - Fx) / mass, x)
                dd += (edges[g + 1] - et) * p[g]
        loss = math.hypot(nb - 1, dd)
        if max_dd is not None and dd > max_dd:
            continue
        if best is None or loss < best[1] - 1e-9:
            best = (phi, loss, tuple(planned))
    return best


class TestThreshold:
    def test_flat_curve_picks_smallest_threshold(self):
        c = _curve(lambda t: 1e-12 * np.asarray(t))
        ch = optimize_threshold_on_curve(c, GRID)
        assert ch.phi == min(DEFAULT_PHI_GRID)
        assert ch.schedule.planned_times == (10.0,) and ch.metrics.expected_nb == pytest.approx(1.0)

    def test_steep_curve_matches_exhaustive_search(self):
        cdf = _exp_cdf(3.0)
        ch = optimize_threshold_on_curve(_curve(cdf), GRID)
        phi, loss, planned = exhaustive_choice(cdf)
        assert ch.schedule.planned_times == planned
        assert ch.metrics.loss == pytest.approx(loss, abs=1e-3)
        assert ch.schedule.planned_times[0] == 0.5

    @pytest.mark.parametrize("rate", [0.05, 0.15, 0.4])
    def test_exhaustive_search_on_exponential_curves(self, rate):
        cdf = _exp_cdf(rate)
        ch = optimize_threshold_on_curve(_curve(cdf), GRID, max_dd=1.5)
        phi, loss, planned = exhaustive_choice(cdf, max_dd=1.5)
        assert ch.schedule.planned_times == planned
        assert ch.metrics.loss == pytest.approx(loss, abs=1e-3)

    def test_delay_constraint_filters_best_loss(self):
        c = _curve(lambda t: np.asarray(t) / 10.0)
        free = optimize_threshold_on_curve(c, GRID, phi_grid=(0.02, 0.99))
        assert free.phi == 0.99 and free.metrics.expected_dd == pytest.approx(5.0, abs=1e-6)
        capped = optimize_threshold_on_curve(c, GRID, phi_grid=(0.02, 0.99), max_dd=1.5)
        assert capped.phi == 0.02 and not capped.constraint_violated

    def test_all_candidates_violate(self):
        c = _curve(lambda t: np.asarray(t) / 10.0)
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            ch = optimize_threshold_on_curve(c, GRID, phi_grid=(0.6, 0.9), max_dd=0.1)
        assert ch.constraint_violated and any(issubclass(x.category, RuntimeWarning) for x in w)
        assert ch.metrics.expected_dd == min(m.expected_dd for _, m in ch.candidates)

    def test_empty_grid(self):
        with pytest.raises(ValueError):
            optimize_threshold_on_curve(_curve(_exp_cdf(0.2)), GRID, phi_grid=())
        with pytest.raises(ValueError):
            optimal_threshold(PredictionContext((), 0.0, 0.0, 0.0, COV62), GRID, None, phi_grid=())

    def test_json(self, tmp_path):
        ch = optimize_threshold_on_curve(_example(EXAMPLE_CURVE_YEAR2), GRID, t_v=2.0)
        d = json.loads(ch.to_json(tmp_path / "c.json").read_text())
        assert d["phi"] == ch.phi and len(d["candidates"]) == len(DEFAULT_PHI_GRID)
