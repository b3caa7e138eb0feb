"""Follow one simulated patient from a risk curve to a personalized biopsy plan.

The generating parameters stand in for a posterior here, so the demo runs
in seconds. The CLI pipeline demo shows the same steps with a fitted model.

Run:  python3 demos/personalized_schedule.py
"""

import numpy as np

from icjm.likelihood import stack_parameters
from icjm.predict import PredictionBudget, PredictionContext, risk_curve
from icjm.schedule import VisitGrid, optimize_threshold_on_curve, plan_schedule, schedule_metrics
from icjm.simulate import PRESET_SPEC, SimulationParams, simulate_patient

truth = SimulationParams(treatment=False)
sim = simulate_patient(truth, 6)
print(f"patient {sim.record.patient_id}: true progression at {sim.true_T_prg:.2f} years")

# Last negative biopsy at year 1, current visit at year 2.
ctx = PredictionContext.from_patient(sim.record, 1.0, 2.0)
psa_t, psa_v = sim.record.psa()
keep = psa_t <= 2.0
print("PSA up to the visit:", np.round(psa_v[keep], 2))

posterior = stack_parameters([truth.effective_model()] * 200)
curve = risk_curve(ctx, posterior, 10.0, budget=PredictionBudget(200, 200, 50, seed=3), spec=PRESET_SPEC)
for t in (2.0, 4.0, 6.0, 10.0):
    print(f"  risk of progression by year {t:>4}: {curve.mean_at(t):.3f}")

grid = VisitGrid.regular(0.5, 10.0)
for phi in (0.05, 0.15, 0.3):
    s = plan_schedule(curve, grid, phi, ctx.t_v)
    m = schedule_metrics(s, curve)
    print(f"phi={phi:.2f}: biopsies at {s.planned_times}  E[Nb]={m.expected_nb:.2f}  E[Dd]={m.expected_dd:.2f}")

best = optimize_threshold_on_curve(curve, grid, ctx.t_v, max_dd=1.5)
print(f"\nchosen threshold {best.phi:.2f} -> {best.schedule.planned_times}")
