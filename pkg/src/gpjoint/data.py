"""Subject-level data containers and CSV serialization.

A subject carries a longitudinal series (times, values), an observed
follow-up time with event indicator, and baseline covariates.  The CSV
schemas are the batch interface of the package:

longitudinal file : ``subject_id,time_months,value``
survival file     : ``subject_id,time_months,event,<covariate columns...>``

UTF-8, ``.`` decimal separator, no thousands separators.  Floats are
written with shortest round-trip formatting so identical inputs produce
byte-identical files.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import InputOutputError, ValidationError

LONGITUDINAL_HEADER = ["subject_id", "time_months", "value"]
SURVIVAL_HEADER_PREFIX = ["subject_id", "time_months", "event"]


@dataclass
class SubjectRecord:
    """One subject's longitudinal series plus survival outcome."""

    subject_id: str
    times: np.ndarray
    values: np.ndarray
    y: float = np.nan
    delta: int = 0
    z_baseline: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.z_baseline = np.asarray(self.z_baseline, dtype=float)

    @property
    def n_obs(self) -> int:
        return self.times.size


@dataclass
class Dataset:
    """Subjects plus the names of their baseline covariate columns."""

    subjects: list[SubjectRecord]
    covariate_names: list[str] = field(default_factory=list)

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    def subject_ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]


def validate_dataset(data: Dataset, min_obs: int = 2) -> None:
    """Check structural soundness before fitting.

    Raises ValidationError naming every offending subject, so a user can
    fix the files in one pass.
    """
    if data.n_subjects == 0:
        raise ValidationError("dataset contains no subjects")
    problems = []
    seen = set()
    p = len(data.covariate_names)
    for s in data.subjects:
        if s.subject_id in seen:
            problems.append(f"{s.subject_id}: duplicate subject id")
        seen.add(s.subject_id)
        if s.times.shape != s.values.shape or s.times.ndim != 1:
            problems.append(f"{s.subject_id}: times/values shape mismatch")
            continue
        if s.n_obs < min_obs:
            problems.append(
                f"{s.subject_id}: {s.n_obs} longitudinal rows, need >= {min_obs}"
            )
        if not np.all(np.isfinite(s.times)) or not np.all(np.isfinite(s.values)):
            problems.append(f"{s.subject_id}: non-finite longitudinal entry")
        if np.any(s.times < 0):
            problems.append(f"{s.subject_id}: negative measurement time")
        if not (np.isfinite(s.y) and s.y > 0):
            problems.append(f"{s.subject_id}: follow-up time must be > 0, got {s.y}")
        if s.delta not in (0, 1):
            problems.append(f"{s.subject_id}: event indicator must be 0 or 1")
        if s.z_baseline.shape != (p,):
            problems.append(
                f"{s.subject_id}: {s.z_baseline.size} baseline covariates, expected {p}"
            )
        elif p and not np.all(np.isfinite(s.z_baseline)):
            problems.append(f"{s.subject_id}: non-finite baseline covariate")
    if problems:
        raise ValidationError("invalid dataset: " + "; ".join(problems))


def _fmt(x) -> str:
    """Shortest round-trip decimal for a float; integers stay integral."""
    xf = float(x)
    if xf == int(xf) and abs(xf) < 1e15:
        return str(int(xf))
    return repr(xf)


def write_longitudinal_csv(path, subjects: list[SubjectRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LONGITUDINAL_HEADER)
        for s in subjects:
            for t, v in zip(s.times, s.values):
                w.writerow([s.subject_id, _fmt(t), _fmt(v)])


def write_survival_csv(
    path, subjects: list[SubjectRecord], covariate_names: list[str]
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SURVIVAL_HEADER_PREFIX + list(covariate_names))
        for s in subjects:
            row = [s.subject_id, _fmt(s.y), str(int(s.delta))]
            row.extend(_fmt(z) for z in s.z_baseline)
            w.writerow(row)


def _parse_float(text: str, path, line_no: int, col: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ValidationError(
            f"{path}:{line_no}: column {col!r}: cannot parse {text!r} as a number"
        ) from None


def read_longitudinal_csv(path) -> dict[str, tuple[list[float], list[float]]]:
    """Parse a longitudinal file into {subject_id: (times, values)}."""
    rows: dict[str, tuple[list[float], list[float]]] = {}
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputOutputError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != LONGITUDINAL_HEADER:
            raise ValidationError(
                f"{path}:1: expected header {','.join(LONGITUDINAL_HEADER)}, "
                f"got {header}"
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValidationError(
                    f"{path}:{line_no}: expected 3 columns, got {len(row)}"
                )
            sid = row[0].strip()
            t = _parse_float(row[1], path, line_no, "time_months")
            v = _parse_float(row[2], path, line_no, "value")
            rows.setdefault(sid, ([], []))
            rows[sid][0].append(t)
            rows[sid][1].append(v)
    return rows


def read_survival_csv(path) -> tuple[dict[str, tuple[float, int, list[float]]], list[str]]:
    """Parse a survival file into {subject_id: (y, delta, covariates)}."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputOutputError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != SURVIVAL_HEADER_PREFIX:
            raise ValidationError(
                f"{path}:1: expected header starting "
                f"{','.join(SURVIVAL_HEADER_PREFIX)}, got {header}"
            )
        covariate_names = [h.strip() for h in header[3:]]
        out: dict[str, tuple[float, int, list[float]]] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 + len(covariate_names):
                raise ValidationError(
                    f"{path}:{line_no}: expected {3 + len(covariate_names)} "
                    f"columns, got {len(row)}"
                )
            sid = row[0].strip()
            if sid in out:
                raise ValidationError(f"{path}:{line_no}: duplicate subject {sid!r}")
            y = _parse_float(row[1], path, line_no, "time_months")
            ev = row[2].strip()
            if ev not in ("0", "1"):
                raise ValidationError(
                    f"{path}:{line_no}: column 'event': expected 0 or 1, got {ev!r}"
                )
            z = [
                _parse_float(row[3 + j], path, line_no, covariate_names[j])
                for j in range(len(covariate_names))
            ]
            out[sid] = (y, int(ev), z)
    return out, covariate_names


def assemble_dataset(longitudinal_path, survival_path) -> Dataset:
    """Join the two files into a validated Dataset.

    Ids must match across files exactly; every survival row needs at
    least two longitudinal rows.
    """
    long_rows = read_longitudinal_csv(longitudinal_path)
    surv_rows, covariate_names = read_survival_csv(survival_path)
    only_long = sorted(set(long_rows) - set(surv_rows))
    only_surv = sorted(set(surv_rows) - set(long_rows))
    if only_long or only_surv:
        parts = []
        if only_long:
            parts.append(f"only in longitudinal file: {', '.join(only_long)}")
        if only_surv:
            parts.append(f"only in survival file: {', '.join(only_surv)}")
        raise ValidationError("subject id mismatch between files: " + "; ".join(parts))
    subjects = []
    for sid in surv_rows:
        times, values = long_rows[sid]
        y, delta, z = surv_rows[sid]
        order = np.argsort(times, kind="stable")
        subjects.append(
            SubjectRecord(
                subject_id=sid,
                times=np.asarray(times)[order],
                values=np.asarray(values)[order],
                y=y,
                delta=delta,
                z_baseline=np.asarray(z),
            )
        )
    data = Dataset(subjects=subjects, covariate_names=covariate_names)
    validate_dataset(data)
    return data
