"""Interval-censored cause-specific joint model for active surveillance.

Joint modelling of PSA trajectories with interval-censored progression and
competing treatment, Bayesian estimation by MCMC, dynamic risk prediction
and risk-based personalized biopsy schedules.

Submodules are imported on first attribute access so that ``icjm.cli`` can
cap numerical-library threads before numpy loads.
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    "quadrature": ("gk15", "integrate_panels", "IntervalRule"),
    "splines": ("KnotVector", "PenaltyMatrix", "ncs_design", "bspline_design", "difference_penalty"),
    "data": ("Dataset", "PatientRecord", "EventRecord", "BaselineCovariates", "LongitudinalObservation",
             "OutcomeKind", "DataValidationError", "load_dataset", "write_dataset", "split_train_test"),
    "likelihood": ("ModelSpec", "ModelParameters", "PriorConfig", "Variant", "CohortLikelihood",
                   "loglik_survival", "loglik_joint", "spec_from_dataset"),
    "mcmc": ("MCMCConfig", "PosteriorSamples", "fit", "save_posterior", "load_posterior", "gelman_rubin",
             "DivergenceError", "ArchiveError"),
    "predict": ("PredictionContext", "PredictionBudget", "RiskCurve", "risk_curve", "risk_full",
                "risk_no_treatment", "risk_at_visit_biopsy", "conditional_risk_from_curve"),
    "schedule": ("VisitGrid", "BiopsySchedule", "plan_schedule", "generate_schedule", "schedule_metrics",
                 "optimal_threshold", "optimize_threshold_on_curve"),
    "simulate": ("SimulationParams", "SimulatedPatient", "simulate_patient", "simulate_dataset",
                 "simulate_event_times", "PRESET_PARAMETERS", "PRESET_SPEC"),
    "evaluate": ("aalen_johansen", "kaplan_meier", "prediction_error_study", "run_schedule_comparison",
                 "effect_curves"),
}
_WHERE = {name: mod for mod, names in _EXPORTS.items() for name in names}

__all__ = sorted(_WHERE) + ["__version__"]


def __getattr__(name):
    if name in _WHERE:
        return getattr(import_module(f".{_WHERE[name]}", __name__), name)
    if name in _EXPORTS:
        return import_module(f".{name}", __name__)
    raise AttributeError(f"module 'icjm' has no attribute {name!r}")


def __dir__():
    return __all__
