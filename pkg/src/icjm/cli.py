"""Command-line pipeline: ``icjm simulate | fit | predict | schedule | evaluate``.

Every command writes a ``<command>_config.json`` snapshot of its resolved
settings next to its outputs. Re-running with ``--config <snapshot>``
reproduces the outputs byte for byte. Settings resolve as command-line
flags over the config file over built-in defaults.

Exit codes: 0 success, 2 usage error, 3 data or validation error,
4 numerical failure (diagnostics are written to ``<out>.diagnostics.json``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
THREADS_ENV = "ICJM_THREADS"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("icjm")

DEFAULTS = {
    "simulate": {"n": 500, "seed": 1, "out": None, "horizon": 10.0, "censor_min": 2.0, "censor_max": 10.0,
                 "treatment": True, "noise": True},
    "fit": {"data": None, "out": None, "variant": "ICJM1", "chains": 3, "iters": 4000, "burnin": 2000,
            "thin": 2, "seed": 2024, "knots": "data"},
    "predict": {"posterior": None, "data": None, "patient": None, "tb": 0.0, "tv": None, "ty": None,
                "horizon": 10.0, "step": 0.5, "draws": 400, "mh": 250, "seed": 1, "out": None},
    "schedule": {"posterior": None, "data": None, "patient": None, "tb": 0.0, "tv": None, "ty": None,
                 "phi": "auto", "max_dd": 1.5, "horizon": 10.0, "step": 0.5, "draws": 400, "mh": 250,
                 "seed": 1, "out": None},
    "evaluate": {"posterior": None, "study": "schedule", "data": None, "sim_config": None, "n_progressed": 50,
                 "n_other": 50, "test_seed": 11, "draws": 400, "mh": 250, "seed": 1, "max_dd": 1.5,
                 "start_times": [0.0, 1.0, 2.0, 3.0, 4.0, 6.0], "window": 2.0, "out": None},
}
REQUIRED = {
    "simulate": ("out",),
    "fit": ("data", "out"),
    "predict": ("posterior", "data", "patient", "out"),
    "schedule": ("posterior", "data", "patient", "out"),
    "evaluate": ("posterior", "out"),
}


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ parser


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icjm", description=__doc__.split("\n\n")[0])
    p.add_argument("--threads", type=int, default=None,
                   help=f"cap on numerical library threads (default: ${THREADS_ENV} or library default)")
    sub = p.add_subparsers(dest="command", required=True)
    # Every option defaults to None so that the config file can fill gaps.
    kw = {"default": None}

    s = sub.add_parser("simulate", help="simulate a cohort with ground truth")
    s.add_argument("--n", type=int, **kw)
    s.add_argument("--seed", type=int, **kw)
    s.add_argument("--horizon", type=float, **kw)
    s.add_argument("--censor-min", type=float, **kw)
    s.add_argument("--censor-max", type=float, **kw)
    s.add_argument("--treatment", type=_bool, **kw, help="simulate the competing treatment hazard")
    s.add_argument("--noise", type=_bool, **kw, help="add measurement noise to PSA")
    s.add_argument("--out", **kw, help="output directory")

    f = sub.add_parser("fit", help="fit the joint model by MCMC")
    f.add_argument("--data", **kw)
    f.add_argument("--variant", choices=("ICJM1", "ICJM2"), **kw)
    f.add_argument("--chains", type=int, **kw)
    f.add_argument("--iters", type=int, **kw)
    f.add_argument("--burnin", type=int, **kw)
    f.add_argument("--thin", type=int, **kw)
    f.add_argument("--seed", type=int, **kw)
    f.add_argument("--knots", choices=("data", "generating"), **kw,
                   help="knots from the data or the simulation generating model")
    f.add_argument("--out", **kw, help="posterior archive path")

    for name, helptext in (("predict", "risk curve for one patient"), ("schedule", "personalized schedule")):
        q = sub.add_parser(name, help=helptext)
        q.add_argument("--posterior", **kw)
        q.add_argument("--data", **kw)
        q.add_argument("--patient", **kw)
        q.add_argument("--tb", type=float, **kw, help="time of the last negative biopsy")
        q.add_argument("--tv", type=float, **kw, help="current visit (default: --tb)")
        q.add_argument("--ty", type=float, **kw, help="last PSA time used (default: --tv)")
        q.add_argument("--horizon", type=float, **kw)
        q.add_argument("--step", type=float, **kw)
        q.add_argument("--draws", type=int, **kw)
        q.add_argument("--mh", type=int, **kw)
        q.add_argument("--seed", type=int, **kw)
        if name == "schedule":
            q.add_argument("--phi", **kw, help="'auto' or a fixed threshold")
            q.add_argument("--max-dd", type=float, **kw)
        q.add_argument("--out", **kw)

    e = sub.add_parser("evaluate", help="evaluation studies")
    e.add_argument("--posterior", **kw)
    e.add_argument("--study", choices=("schedule", "prediction-error", "cif", "effects"), **kw)
    e.add_argument("--data", **kw, help="dataset for the cumulative-incidence study")
    e.add_argument("--sim-config", **kw, help="simulation_params.json written by 'simulate'")
    e.add_argument("--n-progressed", type=int, **kw)
    e.add_argument("--n-other", type=int, **kw)
    e.add_argument("--test-seed", type=int, **kw)
    e.add_argument("--draws", type=int, **kw)
    e.add_argument("--mh", type=int, **kw)
    e.add_argument("--seed", type=int, **kw)
    e.add_argument("--max-dd", type=float, **kw)
    e.add_argument("--start-times", type=float, nargs="+", **kw)
    e.add_argument("--window", type=float, **kw)
    e.add_argument("--out", **kw, help="output directory")

    for sp in (s, f, sub.choices["predict"], sub.choices["schedule"], e):
        sp.add_argument("--config", default=None, help="JSON config file (flags take precedence)")
    return p


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, overlaid by the config file, overlaid by explicit flags."""
    cfg = dict(DEFAULTS[command])
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise UsageError(f"cannot read config {args.config}: {err}") from None
        if doc.get("command", command) != command:
            raise UsageError(f"config is for '{doc['command']}', not '{command}'")
        settings = doc.get("settings", doc)
        unknown = set(settings) - set(cfg) - {"command"}
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update({k: v for k, v in settings.items() if k in cfg})
    for k in cfg:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise UsageError("missing required settings: " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return cfg


# --------------------------------------------------------------- staging


class _Stage:
    """Write outputs to a scratch directory and move them into place only on success."""

    def __init__(self, final: Path, is_dir: bool):
        self.final = final
        self.is_dir = is_dir
        parent = final.parent if final.parent != Path("") else Path(".")
        parent.mkdir(parents=True, exist_ok=True)
        self.root = Path(tempfile.mkdtemp(prefix=".icjm-", dir=parent))

    def path(self, name: str) -> Path:
        return self.root / name

    def commit(self, main: str | None = None) -> None:
        if self.is_dir:
            self.final.mkdir(parents=True, exist_ok=True)
            for f in sorted(self.root.iterdir()):
                os.replace(f, self.final / f.name)
        else:
            for f in sorted(self.root.iterdir()):
                target = self.final if f.name == main else self.final.parent / f.name
                os.replace(f, target)
        shutil.rmtree(self.root, ignore_errors=True)

    def abort(self) -> None:
        shutil.rmtree(self.root, ignore_errors=True)


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _snapshot(command: str, cfg: dict) -> dict:
    return {"command": command, "settings": cfg}


# ---------------------------------------------------------------- commands


def cmd_simulate(cfg: dict, stage: _Stage) -> None:
    from .data import write_dataset
    from .simulate import SimulationParams, event_proportions, simulate_dataset, write_ground_truth

    params = SimulationParams().with_updates(horizon=float(cfg["horizon"]),
                                             censor_range=(float(cfg["censor_min"]), float(cfg["censor_max"])),
                                             treatment=bool(cfg["treatment"]), noise=bool(cfg["noise"]))
    if cfg["n"] <= 0:
        raise ValueError("--n must be positive")
    ds, sims = simulate_dataset(params, int(cfg["n"]), int(cfg["seed"]))
    write_dataset(ds, stage.root)
    write_ground_truth(sims, stage.path("ground_truth.csv"))
    _dump(params.to_dict(), stage.path("simulation_params.json"))
    prog, trt, cens = event_proportions(sims)
    _dump({"progression_pct": prog, "treatment_pct": trt, "censored_pct": cens, "n": len(sims)},
          stage.path("event_summary.json"))
    log.info("simulated %d patients: progression %.2f%%, treatment %.2f%%, censored %.2f%%",
             len(sims), prog, trt, cens)


def cmd_fit(cfg: dict, stage: _Stage) -> None:
    from .data import load_dataset
    from .likelihood import spec_from_dataset
    from .mcmc import MCMCConfig, fit, save_posterior
    from .simulate import PRESET_SPEC

    ds = load_dataset(cfg["data"])
    if cfg["knots"] == "generating":
        if cfg["variant"] != "ICJM1":
            raise ValueError("generating knots exist for ICJM1 only")
        spec = PRESET_SPEC
    else:
        spec = spec_from_dataset(ds, cfg["variant"])
    mc = MCMCConfig(n_iterations=int(cfg["iters"]), n_burnin=int(cfg["burnin"]), thinning=int(cfg["thin"]),
                    n_chains=int(cfg["chains"]), seed=int(cfg["seed"]))
    post = fit(ds, spec, mc, progress=lambda c, i, *_: log.info("chain %d iteration %d", c, i))
    name = Path(cfg["out"]).name
    save_posterior(post, stage.path(name))
    _dump(post.summary(), stage.path(name + ".summary.json"))
    _dump(post.diagnostics, stage.path(name + ".diagnostics.json"))


def _context(cfg: dict):
    from .data import DataValidationError, load_dataset
    from .predict import PredictionContext

    ds = load_dataset(cfg["data"])
    try:
        patient = ds[cfg["patient"]]
    except KeyError:
        raise DataValidationError(f"patient {cfg['patient']!r} present in the dataset", source=cfg["data"]) from None
    tb = float(cfg["tb"])
    tv = tb if cfg["tv"] is None else float(cfg["tv"])
    ty = tv if cfg["ty"] is None else float(cfg["ty"])
    return PredictionContext.from_patient(patient, tb, tv, ty)


def _load_post(path):
    from .mcmc import load_posterior
    return load_posterior(path)


def cmd_predict(cfg: dict, stage: _Stage) -> None:
    from .predict import PredictionBudget, risk_curve

    ctx = _context(cfg)
    post = _load_post(cfg["posterior"])
    budget = PredictionBudget(int(cfg["draws"]), int(cfg["mh"]), seed=int(cfg["seed"]))
    curve = risk_curve(ctx, post, float(cfg["horizon"]), budget=budget, step=float(cfg["step"]))
    name = Path(cfg["out"]).name
    curve.to_csv(stage.path(name))
    curve.to_json(stage.path(name + ".json"))


def cmd_schedule(cfg: dict, stage: _Stage) -> None:
    from .predict import PredictionBudget, risk_curve
    from .schedule import VisitGrid, optimize_threshold_on_curve, plan_schedule, schedule_metrics

    ctx = _context(cfg)
    post = _load_post(cfg["posterior"])
    budget = PredictionBudget(int(cfg["draws"]), int(cfg["mh"]), seed=int(cfg["seed"]))
    grid = VisitGrid.regular(float(cfg["step"]), float(cfg["horizon"]))
    curve = risk_curve(ctx, post, grid.horizon, budget=budget, step=float(cfg["step"]))
    if str(cfg["phi"]).lower() == "auto":
        doc = optimize_threshold_on_curve(curve, grid, ctx.t_v, max_dd=cfg["max_dd"]).to_dict()
    else:
        phi = float(cfg["phi"])
        if not 0.0 < phi < 1.0:
            raise ValueError("--phi must be 'auto' or lie in (0, 1)")
        sched = plan_schedule(curve, grid, phi, ctx.t_v)
        doc = {"phi": phi, "schedule": sched.to_dict(), "metrics": schedule_metrics(sched, curve).to_dict(),
               "constraint_violated": False, "candidates": []}
    doc["patient"] = cfg["patient"]
    _dump(doc, stage.path(Path(cfg["out"]).name))


def cmd_evaluate(cfg: dict, stage: _Stage) -> None:
    from . import evaluate as ev
    from .data import load_dataset
    from .predict import PredictionBudget
    from .simulate import SimulationParams

    study = cfg["study"]
    if study == "cif":
        if cfg["data"] is None:
            raise UsageError("the cif study needs --data")
        est = ev.aalen_johansen(ev.events_from_dataset(load_dataset(cfg["data"])))
        est.to_csv(stage.path("cif.csv"))
        return
    post = _load_post(cfg["posterior"])
    if study == "effects":
        contrasts = [ev.psa_value_contrast(10.0, 5.0), ev.psa_change_contrast(1.0, 0.3)]
        if post.spec.n_alpha > 2:
            contrasts.append(ev.core_ratio_contrast(0.30, 0.15))
        rows = ev.effect_curves(post, contrasts, stage.path("effects.csv"))
        _dump(rows, stage.path("effects.json"))
        return
    if cfg["sim_config"] is None:
        raise UsageError(f"the {study} study needs --sim-config")
    try:
        params = SimulationParams.from_dict(json.loads(Path(cfg["sim_config"]).read_text()))
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as err:
        from .data import DataValidationError
        raise DataValidationError(f"readable simulation parameters ({err})", source=cfg["sim_config"]) from None
    sims = ev.build_test_cohort(params, int(cfg["n_progressed"]), int(cfg["n_other"]), int(cfg["test_seed"]))
    budget = PredictionBudget(int(cfg["draws"]), int(cfg["mh"]), seed=int(cfg["seed"]))
    if study == "prediction-error":
        truth = params.with_updates(treatment=False)
        report = ev.prediction_error_study(post, sims, truth, tuple(cfg["start_times"]), float(cfg["window"]),
                                           budget)
        _dump({str(k): v for k, v in report.items()}, stage.path("prediction_error.json"))
        return
    rows, summary = ev.run_schedule_comparison(post, sims, max_dd=cfg["max_dd"], budget=budget,
                                               progress=lambda i, n: log.info("patient %d/%d", i, n))
    import csv
    with stage.path("schedule_comparison.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "policy", "n_biopsies_conducted", "detection_delay", "progressed"])
        for r in rows:
            w.writerow([r.patient_id, r.policy, r.n_biopsies_conducted,
                        "" if r.detection_delay is None else repr(r.detection_delay), int(r.progressed)])
    _dump({"summary": summary, "rows": [r.to_dict() for r in rows]}, stage.path("schedule_comparison.json"))


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict, "schedule": cmd_schedule,
            "evaluate": cmd_evaluate}
DIR_OUTPUT = {"simulate", "evaluate"}


def _apply_threads(n: int | None) -> None:
    if n is None and os.environ.get(THREADS_ENV):
        n = int(os.environ[THREADS_ENV])
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be at least 1")
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    command = args.command
    try:
        _apply_threads(args.threads)
        cfg = resolve_config(command, args)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"icjm {command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE

    out = Path(cfg["out"])
    stage = _Stage(out, command in DIR_OUTPUT)
    base = "" if command in DIR_OUTPUT else out.name + "."
    handler = logging.FileHandler(stage.path(f"{base}{command}.log"), mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    _dump(_snapshot(command, cfg), stage.path(f"{base}{command}_config.json"))

    from numpy.linalg import LinAlgError
    from .data import DataValidationError
    from .mcmc import ArchiveError, DivergenceError
    from .schedule import UndefinedMetricError

    code = EXIT_OK
    try:
        COMMANDS[command](cfg, stage)
    except UsageError as err:
        print(f"icjm {command}: error: {err}", file=sys.stderr)
        code = EXIT_USAGE
    except (DataValidationError, ArchiveError, FileNotFoundError, KeyError, ValueError) as err:
        print(f"icjm {command}: data error: {err}", file=sys.stderr)
        code = EXIT_DATA
    except (DivergenceError, LinAlgError, FloatingPointError, UndefinedMetricError) as err:
        print(f"icjm {command}: numerical failure: {err}", file=sys.stderr)
        diag = getattr(err, "diagnostics", None) or {"error": str(err)}
        target = out if command in DIR_OUTPUT else out.parent
        target.mkdir(parents=True, exist_ok=True)
        _dump({"error": str(err), "diagnostics": diag},
              (target / f"{command}.diagnostics.json") if command in DIR_OUTPUT
              else out.with_name(out.name + ".diagnostics.json"))
        code = EXIT_NUMERIC
    finally:
        log.removeHandler(handler)
        handler.close()
    if code == EXIT_OK:
        stage.commit(None if command in DIR_OUTPUT else out.name)
    else:
        stage.abort()
    return code


if __name__ == "__main__":
    sys.exit(main())
