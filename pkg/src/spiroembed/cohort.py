"""Subject records: demographics, ejection fractions, labels and the cohort CSV."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .exceptions import ValidationError
from .spiro import FlowVolumeCurve, VolumeTimeSeries

BASE_DEMOGRAPHICS = ("age", "sex", "smoke", "copd")
EXTENDED_FLAGS = ("obesity", "hypertension", "diabetes", "ckd", "chd", "lhf", "vhd")

RVEF_THRESHOLD = 45.0
LVEF_THRESHOLD = 50.0


@dataclass(frozen=True)
class DemographicVector:
    age: int
    sex: int  # 1 = male
    smoke: int
    copd: int
    obesity: int = 0
    hypertension: int = 0
    diabetes: int = 0
    ckd: int = 0
    chd: int = 0
    lhf: int = 0
    vhd: int = 0
    bmi: float | None = None

    def __post_init__(self):
        if not 18 <= self.age <= 120:
            raise ValidationError(f"age {self.age} outside [18, 120]")
        for name in ("sex", "smoke", "copd") + EXTENDED_FLAGS:
            if getattr(self, name) not in (0, 1):
                raise ValidationError(f"{name} must be 0 or 1")

    def values(self, extended: bool = False) -> list[float]:
        names = feature_names(extended)
        return [float(getattr(self, n)) for n in names]


def feature_names(extended: bool = False) -> list[str]:
    return list(BASE_DEMOGRAPHICS + (EXTENDED_FLAGS if extended else ()))


def derive_labels(
    rvef: float | None,
    lvef: float | None,
    rvef_threshold: float = RVEF_THRESHOLD,
    lvef_threshold: float = LVEF_THRESHOLD,
) -> tuple[int | None, int | None]:
    """RHF iff RVEF <= threshold (inclusive); LHF iff LVEF < threshold."""
    for name, v in (("rvef", rvef), ("lvef", lvef)):
        if v is not None and not 0 < v <= 100:
            raise ValidationError(f"{name} {v} outside (0, 100]")
    rhf = None if rvef is None else int(rvef <= rvef_threshold)
    lhf = None if lvef is None else int(lvef < lvef_threshold)
    return rhf, lhf


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    curve: FlowVolumeCurve | None
    demo: DemographicVector
    rvef: float | None = None
    lvef: float | None = None
    label_rhf: int = 0
    label_lhf: int = 0
    blow: VolumeTimeSeries | None = field(default=None, compare=False, repr=False)

    @classmethod
    def build(cls, subject_id, curve, demo, rvef=None, lvef=None, blow=None,
              rvef_threshold=RVEF_THRESHOLD, lvef_threshold=LVEF_THRESHOLD) -> "SubjectRecord":
        rhf, lhf = derive_labels(rvef, lvef, rvef_threshold, lvef_threshold)
        return cls(subject_id, curve, demo, rvef, lvef, rhf or 0, lhf if lhf is not None else demo.lhf, blow)


COHORT_COLUMNS = ["subject_id"] + list(BASE_DEMOGRAPHICS) + list(EXTENDED_FLAGS) + ["bmi", "rvef", "lvef"]


def cohort_rows(records: Sequence[SubjectRecord]) -> tuple[list[str], list[list[str]]]:
    rows = []
    for r in records:
        d = r.demo
        rows.append(
            [r.subject_id]
            + [str(getattr(d, n)) for n in BASE_DEMOGRAPHICS + EXTENDED_FLAGS]
            + ["" if d.bmi is None else repr(float(d.bmi))]
            + ["" if r.rvef is None else repr(float(r.rvef)), "" if r.lvef is None else repr(float(r.lvef))]
        )
    return COHORT_COLUMNS, rows


def read_cohort_csv(
    path, curves: dict[str, FlowVolumeCurve] | None = None,
    rvef_threshold: float = RVEF_THRESHOLD, lvef_threshold: float = LVEF_THRESHOLD,
) -> list[SubjectRecord]:
    """Read the cohort table and join curves by subject id.

    Subjects without a curve are dropped when ``curves`` is given.
    """
    out = []
    with open(Path(path), newline="") as fh:
        lines = (line for line in fh if not line.startswith("#"))
        for row in csv.DictReader(lines):
            sid = row["subject_id"]
            if curves is not None and sid not in curves:
                continue
            flags = {n: int(row.get(n) or 0) for n in ("sex", "smoke", "copd") + EXTENDED_FLAGS}
            demo = DemographicVector(
                age=int(row["age"]),
                bmi=float(row["bmi"]) if row.get("bmi") else None,
                **flags,
            )
            rvef = float(row["rvef"]) if row.get("rvef") else None
            lvef = float(row["lvef"]) if row.get("lvef") else None
            curve = curves.get(sid) if curves is not None else None
            out.append(SubjectRecord.build(sid, curve, demo, rvef, lvef, None, rvef_threshold, lvef_threshold))
    return out
