"""Run the whole command-line pipeline on a small budget in a scratch directory.

simulate -> fit -> predict -> schedule -> evaluate, then re-run the
simulation from its config snapshot and confirm the outputs match byte for
byte. Budgets are far below what a real analysis needs.

Run:  python3 demos/cli_pipeline.py
"""

import filecmp
import json
import tempfile
from pathlib import Path

from icjm.cli import main


def run(*argv):
    code = main(list(argv))
    print(f"icjm {' '.join(argv[:1])} -> exit {code}")
    assert code == 0


with tempfile.TemporaryDirectory() as tmp:
    d = Path(tmp)
    run("simulate", "--n", "80", "--seed", "3", "--out", str(d / "sim"))
    run("fit", "--data", str(d / "sim"), "--out", str(d / "post.json"), "--chains", "2", "--iters", "300",
        "--burnin", "150", "--knots", "generating")
    run("predict", "--posterior", str(d / "post.json"), "--data", str(d / "sim"), "--patient", "p01",
        "--tb", "1", "--draws", "50", "--mh", "100", "--out", str(d / "risk.csv"))
    run("schedule", "--posterior", str(d / "post.json"), "--data", str(d / "sim"), "--patient", "p01",
        "--tb", "1", "--draws", "50", "--mh", "100", "--out", str(d / "plan.json"))
    run("evaluate", "--study", "cif", "--posterior", str(d / "post.json"), "--data", str(d / "sim"),
        "--out", str(d / "cif"))

    print("\nevent summary:", json.loads((d / "sim" / "event_summary.json").read_text()))
    plan = json.loads((d / "plan.json").read_text())
    print("planned biopsies:", plan["schedule"]["planned_times"], "threshold", plan["phi"])
    print("cumulative incidence (last rows):")
    print("\n".join((d / "cif" / "cif.csv").read_text().splitlines()[-3:]))

    snap = json.loads((d / "sim" / "simulate_config.json").read_text())
    snap["settings"]["out"] = str(d / "sim2")
    (d / "cfg.json").write_text(json.dumps(snap))
    run("simulate", "--config", str(d / "cfg.json"))
    same = all(filecmp.cmp(d / "sim" / f, d / "sim2" / f, shallow=False)
               for f in ("events.csv", "longitudinal.csv", "ground_truth.csv"))
    print("re-run from snapshot identical:", same)
