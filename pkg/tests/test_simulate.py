import math

import numpy as np
import pytest
from scipy import stats

from helpers import COV62, constant_hazard_params

from icjm.likelihood import mean_psa
from icjm.simulate import (OBSERVED_PROPORTIONS, PRESET_PARAMETERS, PRESET_SPEC, TARGET_PROPORTIONS, SimulationParams,
                           _EventSolver, _observe, event_proportions, read_ground_truth, simulate_dataset,
                           simulate_event_times, simulate_patient, write_ground_truth)


def _constant(h_p, h_t, horizon=100.0):
    return SimulationParams(model=constant_hazard_params(h_p, h_t), horizon=horizon)


class TestPreset:
    def test_published_means(self):
        p = PRESET_PARAMETERS
        np.testing.assert_allclose(p.beta, [2.34, 0.28, 0.61, 0.95, 0.02])
        np.testing.assert_allclose(p.gamma, [0.50, 0.23])
        np.testing.assert_allclose(p.alpha, [[0.13, 3.01], [0.42, 2.62]])
        assert float(p.tau_eps) == pytest.approx(47.40)
        assert p.gamma_h0.shape == (2, 12)

    def test_omega_symmetric_pd(self):
        om = PRESET_PARAMETERS.Omega
        np.testing.assert_array_equal(om, om.T)
        np.linalg.cholesky(om)

    def test_reference_proportions(self):
        assert sum(TARGET_PROPORTIONS) == pytest.approx(100.0)
        assert OBSERVED_PROPORTIONS == (21.97, 10.44, 67.59)

    def test_params_round_trip(self):
        p = SimulationParams(treatment=False, noise=False)
        q = SimulationParams.from_dict(p.to_dict())
        assert q.to_dict() == p.to_dict()


class TestPatient:
    def test_noise_free_inversion(self):
        params = SimulationParams(noise=False)
        sim = simulate_patient(params, 3, u=np.zeros(4), covariates=COV62)
        t = np.array([o.time for o in sim.full_history])
        v = np.array([o.value for o in sim.full_history])
        m = mean_psa(t, params.model.beta, np.zeros(4), 62.0, PRESET_SPEC.ncs_knots)
        np.testing.assert_allclose(np.log2(v + 1.0), m, rtol=0, atol=1e-13)

    def test_deterministic(self):
        a = simulate_patient(SimulationParams(), 17)
        b = simulate_patient(SimulationParams(), 17)
        assert a.record == b.record and np.array_equal(a.true_u, b.true_u)
        assert (a.true_T_prg, a.true_T_trt) == (b.true_T_prg, b.true_T_trt)

    def test_psa_schedule(self):
        sim = simulate_patient(SimulationParams(), 1)
        t = np.array([o.time for o in sim.full_history])
        assert t[0] == 0.0
        np.testing.assert_allclose(np.diff(t), 0.25, atol=2 * 14 / 365.25 + 1e-12)

    def test_interval_bookkeeping(self):
        params = SimulationParams(biopsy_jitter=0.0, censor_range=(10.0, 10.0))
        rec, biopsies, censor, _ = _observe("x", params, COV62, np.zeros(4), 3.2, math.inf,
                                            np.random.default_rng(0))
        assert (rec.event.delta, rec.event.t_prg_minus, rec.event.t_upper) == (1, 2.0, 4.0)
        np.testing.assert_array_equal(biopsies, [0, 1, 2, 4, 6, 8, 10])
        assert max(o.time for o in rec.longitudinal) <= 4.0

    def test_treatment_observed_exactly(self):
        params = SimulationParams(biopsy_jitter=0.0, censor_range=(10.0, 10.0))
        rec, *_ = _observe("x", params, COV62, np.zeros(4), math.inf, 4.7, np.random.default_rng(0))
        assert (rec.event.delta, rec.event.t_prg_minus, rec.event.t_upper) == (2, 4.0, 4.7)

    def test_censored_before_detection(self):
        params = SimulationParams(biopsy_jitter=0.0, censor_range=(5.0, 5.0))
        rec, *_ = _observe("x", params, COV62, np.zeros(4), 7.0, math.inf, np.random.default_rng(0))
        assert (rec.event.delta, rec.event.t_prg_minus, rec.event.t_upper) == (0, 4.0, 5.0)


@pytest.fixture(scope="module")
def cohort():
    return simulate_dataset(SimulationParams(), 600, seed=21)


class TestCohortInvariants:
    def test_intervals_bracket_truth(self, cohort):
        _, sims = cohort
        prog = [s for s in sims if s.record.event.delta == 1]
        assert prog
        for s in prog:
            assert s.record.event.t_prg_minus < s.true_T_prg <= s.record.event.t_upper

    def test_treatment_time_is_upper(self, cohort):
        _, sims = cohort
        for s in sims:
            if s.record.event.delta == 2:
                assert s.true_T_trt == s.record.event.t_upper

    def test_only_one_finite_event(self, cohort):
        _, sims = cohort
        for s in sims:
            assert not (math.isfinite(s.true_T_prg) and math.isfinite(s.true_T_trt))
            assert s.true_cause in ("PRG", "TRT", "NONE")

    def test_root_residual(self):
        params = SimulationParams()
        solver = _EventSolver(params.model, params.spec, params.horizon)
        rng = np.random.default_rng(3)
        residuals = []
        for _ in range(300):
            u = rng.multivariate_normal(np.zeros(4), params.model.Omega)
            *_, r = solver.draw(u, COV62, rng)
            residuals.append(r)
        assert max(residuals) < 1e-8

    def test_ground_truth_round_trip(self, cohort, tmp_path):
        _, sims = cohort
        back = read_ground_truth(write_ground_truth(sims, tmp_path / "g.csv"))
        for s in sims:
            assert back[s.record.patient_id] == s.truth

    def test_proportions_sum(self, cohort):
        _, sims = cohort
        assert sum(event_proportions(sims)) == pytest.approx(100.0)

    def test_provenance(self, cohort):
        ds, _ = cohort
        assert "seed=21" in ds.provenance and "progression=" in ds.provenance


class TestEventTimes:
    def test_competing_exponentials(self):
        # Beyond 30 years the survival is exp(-12); a handful of draws at most.
        params = _constant(0.3, 0.1, horizon=30.0)
        solver = _EventSolver(params.model, params.spec, params.horizon)
        rng = np.random.default_rng(8)
        draws = [solver.draw(np.zeros(4), COV62, rng)[:3] for _ in range(100_000)]
        causes = np.array([c for *_, c in draws])
        times = np.array([min(a, b) for a, b, _ in draws])
        assert np.sum(causes == "NONE") <= 5
        assert abs(np.mean(causes[causes != "NONE"] == "PRG") - 0.75) < 0.005
        assert stats.kstest(times[np.isfinite(times)], "expon", args=(0, 1 / 0.4)).pvalue > 0.01

    def test_zero_treatment_hazard(self):
        params = _constant(0.3, 0.1).with_updates(treatment=False)
        causes = {simulate_event_times(params, np.zeros(4), COV62, s)[2] for s in range(200)}
        assert causes == {"PRG"}

    def test_doubling_hazards_halves_times(self):
        slow, fast = _constant(0.2, 0.1), _constant(0.4, 0.2)
        for seed in range(30):
            a = min(simulate_event_times(slow, np.zeros(4), COV62, seed)[:2])
            b = min(simulate_event_times(fast, np.zeros(4), COV62, seed)[:2])
            assert b == pytest.approx(a / 2, rel=1e-9)

    def test_events_beyond_horizon(self):
        params = _constant(1e-4, 1e-4, horizon=10.0)
        res = [simulate_event_times(params, np.zeros(4), COV62, s) for s in range(50)]
        assert sum(r[2] == "NONE" for r in res) >= 45
        assert all(r == (math.inf, math.inf, "NONE") for r in res if r[2] == "NONE")


class TestDataset:
    def test_single_patient(self):
        ds, sims = simulate_dataset(SimulationParams(), 1, seed=0)
        assert len(ds) == 1 and len(sims) == 1 and list(ds.ids) == ["p1"]

    def test_needs_positive_n(self):
        with pytest.raises(ValueError):
            simulate_dataset(SimulationParams(), 0, seed=0)

    def test_seed_reproducible(self):
        a, _ = simulate_dataset(SimulationParams(), 20, seed=9)
        b, _ = simulate_dataset(SimulationParams(), 20, seed=9)
        assert a.patients == b.patients
