"""Patients, observations, event windows, and dataset I/O.

Two on-disk layouts share one schema:

* a directory holding ``longitudinal.csv`` (``patient_id,time,kind,value,trials``)
  and ``events.csv`` (``patient_id,delta,t_prg_minus,t_upper,age,psa_density``);
* a single ``.json`` file ``{"provenance": ..., "longitudinal": [...], "events": [...]}``
  whose rows carry the same keys.

PSA values are stored raw (ng/ml); the ``log2(PSA + 1)`` transform happens
inside the likelihood.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

__all__ = [
    "OutcomeKind",
    "LongitudinalObservation",
    "EventRecord",
    "BaselineCovariates",
    "PatientRecord",
    "Dataset",
    "DataValidationError",
    "load_dataset",
    "write_dataset",
    "split_train_test",
]

LONGITUDINAL_FIELDS = ["patient_id", "time", "kind", "value", "trials"]
EVENT_FIELDS = ["patient_id", "delta", "t_prg_minus", "t_upper", "age", "psa_density"]


class DataValidationError(ValueError):
    """A schema or invariant violation, naming the offending row and rule."""

    def __init__(self, rule: str, row=None, source: str | None = None):
        self.rule = rule
        self.row = row
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}"
        if row is not None:
            where += f" row {row}"
        super().__init__(f"{where.strip()}: violates '{rule}'" if where else f"violates '{rule}'")


class OutcomeKind(str, Enum):
    PSA = "psa"
    CORE_RATIO = "cr"


@dataclass(frozen=True)
class LongitudinalObservation:
    patient_id: str
    time: float
    kind: OutcomeKind
    value: float
    trials: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", OutcomeKind(self.kind))
        if not self.time >= 0:
            raise DataValidationError("time >= 0")
        if self.kind is OutcomeKind.PSA:
            if self.trials is not None:
                raise DataValidationError("trials present iff kind = cr")
            if not self.value >= 0:
                raise DataValidationError("PSA value >= 0")
        else:
            if self.trials is None:
                raise DataValidationError("trials present iff kind = cr")
            if self.trials <= 0 or not (0 <= self.value <= self.trials) or self.value != int(self.value):
                raise DataValidationError("0 <= positive cores <= trials")


@dataclass(frozen=True)
class EventRecord:
    """Observed event window.

    ``t_upper`` is the censoring time when ``delta == 0``, the detecting
    biopsy time when ``delta == 1`` and the treatment time when ``delta == 2``.
    """

    delta: int
    t_prg_minus: float
    t_upper: float

    def __post_init__(self):
        if self.delta not in (0, 1, 2):
            raise DataValidationError("delta in {0, 1, 2}")
        if not self.t_prg_minus >= 0:
            raise DataValidationError("t_prg_minus >= 0")
        if self.delta == 1 and not self.t_prg_minus < self.t_upper:
            raise DataValidationError("delta = 1 requires t_prg_minus < t_upper")
        if self.delta != 1 and not self.t_prg_minus <= self.t_upper:
            raise DataValidationError("t_prg_minus <= t_upper")


@dataclass(frozen=True)
class BaselineCovariates:
    age: float
    psa_density: float

    def __post_init__(self):
        if not self.age > 0:
            raise DataValidationError("age > 0")
        if not self.psa_density > 0:
            raise DataValidationError("psa_density > 0")


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    covariates: BaselineCovariates
    longitudinal: tuple
    event: EventRecord

    def __post_init__(self):
        obs = tuple(self.longitudinal)
        object.__setattr__(self, "longitudinal", obs)
        for o in obs:
            if o.patient_id != self.patient_id:
                raise DataValidationError("observation patient_id matches record")
            if o.time > self.event.t_upper + 1e-9:
                raise DataValidationError("observation times <= t_upper")

    def psa(self) -> tuple[np.ndarray, np.ndarray]:
        """PSA times and raw values, in file order."""
        rows = [(o.time, o.value) for o in self.longitudinal if o.kind is OutcomeKind.PSA]
        arr = np.array(rows, dtype=float).reshape(-1, 2)
        return arr[:, 0], arr[:, 1]

    def core_ratio(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Core-ratio times, positive counts, and trials."""
        rows = [(o.time, o.value, o.trials) for o in self.longitudinal if o.kind is OutcomeKind.CORE_RATIO]
        arr = np.array(rows, dtype=float).reshape(-1, 3)
        return arr[:, 0], arr[:, 1], arr[:, 2]

    def truncated(self, t: float) -> "PatientRecord":
        """Copy keeping only observations at or before ``t``."""
        return replace(self, longitudinal=tuple(o for o in self.longitudinal if o.time <= t))


@dataclass(frozen=True)
class Dataset:
    patients: tuple
    provenance: str = ""
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        patients = tuple(self.patients)
        object.__setattr__(self, "patients", patients)
        if not patients:
            raise DataValidationError("dataset nonempty")
        index = {}
        for i, p in enumerate(patients):
            if p.patient_id in index:
                raise DataValidationError("unique patient ids", row=p.patient_id)
            index[p.patient_id] = i
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    def __getitem__(self, patient_id: str) -> PatientRecord:
        return self.patients[self._index[patient_id]]

    @property
    def ids(self) -> list[str]:
        return [p.patient_id for p in self.patients]

    def subset(self, ids, provenance: str | None = None) -> "Dataset":
        return Dataset(tuple(self[i] for i in ids), self.provenance if provenance is None else provenance)

    def deltas(self) -> np.ndarray:
        return np.array([p.event.delta for p in self.patients])


# --------------------------------------------------------------------- I/O


def _num(s: str) -> float:
    return float(s)


def _fmt(x) -> str:
    return repr(float(x))


def _build(long_rows, event_rows, provenance: str, source: str) -> Dataset:
    by_id: dict[str, list] = {}
    for i, row in enumerate(long_rows, start=1):
        try:
            kind = str(row["kind"]).strip()
            if kind not in ("psa", "cr"):
                raise DataValidationError("kind in {psa, cr}")
            trials_raw = row.get("trials")
            trials = None if trials_raw in (None, "") else int(float(trials_raw))
            obs = LongitudinalObservation(
                str(row["patient_id"]), _num(row["time"]), OutcomeKind(kind), _num(row["value"]), trials
            )
        except DataValidationError as e:
            raise DataValidationError(e.rule, row=i, source=f"{source}:longitudinal") from None
        except (KeyError, ValueError, TypeError) as e:
            raise DataValidationError(f"well-formed longitudinal row ({e})", row=i, source=f"{source}:longitudinal") from None
        by_id.setdefault(obs.patient_id, []).append(obs)
    patients = []
    seen = set()
    for i, row in enumerate(event_rows, start=1):
        try:
            pid = str(row["patient_id"])
            if pid in seen:
                raise DataValidationError("unique patient ids")
            seen.add(pid)
            delta_f = float(row["delta"])
            if delta_f != int(delta_f):
                raise DataValidationError("delta in {0, 1, 2}")
            ev = EventRecord(int(delta_f), _num(row["t_prg_minus"]), _num(row["t_upper"]))
            cov = BaselineCovariates(_num(row["age"]), _num(row["psa_density"]))
            patients.append(PatientRecord(pid, cov, tuple(by_id.pop(pid, [])), ev))
        except DataValidationError as e:
            raise DataValidationError(e.rule, row=i, source=f"{source}:events") from None
        except (KeyError, ValueError, TypeError) as e:
            raise DataValidationError(f"well-formed event row ({e})", row=i, source=f"{source}:events") from None
    if by_id:
        orphan = sorted(by_id)[0]
        raise DataValidationError("every longitudinal patient_id has an event row", row=orphan, source=source)
    return Dataset(tuple(patients), provenance)


def _read_csv(path: Path, fields: list[str]) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != fields:
            raise DataValidationError(f"header {','.join(fields)}", source=str(path))
        return [{k.strip(): (v.strip() if isinstance(v, str) else v) for k, v in r.items()} for r in reader]


def load_dataset(path) -> Dataset:
    """Load and validate a dataset directory (two CSVs) or a ``.json`` file."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataValidationError(f"readable JSON ({e})", source=str(path)) from None
        if not isinstance(doc, dict) or "longitudinal" not in doc or "events" not in doc:
            raise DataValidationError("JSON object with 'longitudinal' and 'events'", source=str(path))
        return _build(doc["longitudinal"], doc["events"], str(doc.get("provenance", "")), str(path))
    if path.is_dir():
        long_rows = _read_csv(path / "longitudinal.csv", LONGITUDINAL_FIELDS)
        event_rows = _read_csv(path / "events.csv", EVENT_FIELDS)
        prov_file = path / "provenance.txt"
        provenance = prov_file.read_text().strip() if prov_file.exists() else ""
        return _build(long_rows, event_rows, provenance, str(path))
    raise DataValidationError("dataset path is a directory or .json file", source=str(path))


def _rows(ds: Dataset) -> tuple[list[dict], list[dict]]:
    long_rows, event_rows = [], []
    for p in ds.patients:
        for o in p.longitudinal:
            long_rows.append({
                "patient_id": p.patient_id,
                "time": _fmt(o.time),
                "kind": o.kind.value,
                "value": _fmt(o.value) if o.kind is OutcomeKind.PSA else str(int(o.value)),
                "trials": "" if o.trials is None else str(int(o.trials)),
            })
        event_rows.append({
            "patient_id": p.patient_id,
            "delta": str(p.event.delta),
            "t_prg_minus": _fmt(p.event.t_prg_minus),
            "t_upper": _fmt(p.event.t_upper),
            "age": _fmt(p.covariates.age),
            "psa_density": _fmt(p.covariates.psa_density),
        })
    return long_rows, event_rows


def write_dataset(ds: Dataset, path) -> Path:
    """Write ``ds`` as a CSV directory, or as JSON when ``path`` ends in ``.json``."""
    path = Path(path)
    long_rows, event_rows = _rows(ds)
    if path.suffix.lower() == ".json":
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"provenance": ds.provenance, "longitudinal": long_rows, "events": event_rows}
        path.write_text(json.dumps(doc, indent=1) + "\n")
        return path
    path.mkdir(parents=True, exist_ok=True)
    for name, fields, rows in (
        ("longitudinal.csv", LONGITUDINAL_FIELDS, long_rows),
        ("events.csv", EVENT_FIELDS, event_rows),
    ):
        with open(path / name, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    (path / "provenance.txt").write_text(ds.provenance + "\n")
    return path


def split_train_test(ds: Dataset, n_train: int, n_test_progressed: int, n_test_other: int,
                     seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint train/test split; the test set is stratified on ``delta == 1``."""
    rng = np.random.default_rng(seed)
    ids = np.array(ds.ids)
    prog = ids[ds.deltas() == 1]
    other = ids[ds.deltas() != 1]
    if n_test_progressed > prog.size:
        raise DataValidationError(f"stratum shortage: {n_test_progressed} progressed requested, {prog.size} available")
    if n_test_other > other.size:
        raise DataValidationError(f"stratum shortage: {n_test_other} non-progressed requested, {other.size} available")
    test_prog = rng.choice(prog, n_test_progressed, replace=False)
    test_other = rng.choice(other, n_test_other, replace=False)
    test_ids = set(test_prog) | set(test_other)
    rest = np.array([i for i in ids if i not in test_ids])
    if n_train > rest.size:
        raise DataValidationError(f"stratum shortage: {n_train} training patients requested, {rest.size} available")
    train_ids = set(rng.choice(rest, n_train, replace=False))
    train = [i for i in ids if i in train_ids]
    test = [i for i in ids if i in test_ids]
    return ds.subset(train, ds.provenance + "|train"), ds.subset(test, ds.provenance + "|test")
