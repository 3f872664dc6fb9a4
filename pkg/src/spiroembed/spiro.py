"""Volume-time spirometry to fixed-length flow-volume curves.

Raw blows arrive as exhaled volume sampled every 10 ms. They are converted to
liters, differentiated into flow, paired into a flow-volume curve and
zero-padded (or truncated) to ``CURVE_LENGTH`` samples.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import BlowRejected, ValidationError

CURVE_LENGTH = 1000
SAMPLE_PERIOD_S = 0.01


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class VolumeTimeSeries:
    subject_id: str
    samples: np.ndarray
    sample_period_s: float = SAMPLE_PERIOD_S

    def __post_init__(self):
        samples = _frozen(np.ravel(self.samples))
        if samples.size == 0:
            raise ValidationError("volume series is empty")
        if not np.all(np.isfinite(samples)):
            raise ValidationError("volume series contains non-finite samples")
        if not self.sample_period_s > 0:
            raise ValidationError("sample period must be positive")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class FlowVolumeCurve:
    """Paired volume (L) and flow (L/s) arrays of length ``CURVE_LENGTH``.

    Entries at or beyond ``valid_len`` are exactly zero.
    """

    volume: np.ndarray
    flow: np.ndarray
    valid_len: int
    subject_id: str = ""

    def __post_init__(self):
        volume = _frozen(self.volume)
        flow = _frozen(self.flow)
        n = int(self.valid_len)
        if volume.shape != (CURVE_LENGTH,) or flow.shape != (CURVE_LENGTH,):
            raise ValidationError(f"curve arrays must have length {CURVE_LENGTH}")
        if not 0 < n <= CURVE_LENGTH:
            raise ValidationError(f"valid_len {n} outside (0, {CURVE_LENGTH}]")
        if np.any(volume[n:] != 0) or np.any(flow[n:] != 0):
            raise ValidationError("padding region must be zero")
        if not (np.all(np.isfinite(volume)) and np.all(np.isfinite(flow))):
            raise ValidationError("curve contains non-finite values")
        if n > 1 and np.min(np.diff(volume[:n])) < -1e-9:
            raise ValidationError("volume must be nondecreasing over the valid range")
        object.__setattr__(self, "volume", volume)
        object.__setattr__(self, "flow", flow)
        object.__setattr__(self, "valid_len", n)

    def with_arrays(self, volume=None, flow=None, valid_len=None) -> "FlowVolumeCurve":
        return FlowVolumeCurve(
            volume=self.volume if volume is None else volume,
            flow=self.flow if flow is None else flow,
            valid_len=self.valid_len if valid_len is None else valid_len,
            subject_id=self.subject_id,
        )

    def as_input(self) -> np.ndarray:
        """``(length, 2)`` array of (volume, flow) pairs fed to the encoder."""
        return np.stack([self.volume, self.flow], axis=1)


@dataclass(frozen=True)
class SpiroFeatures:
    fvc: float
    fev1: float
    pef: float
    fef25: float
    fef50: float
    fef75: float


@dataclass(frozen=True)
class BlowCriteria:
    """Acceptance thresholds for a single blow."""

    min_volume_l: float = 0.5
    min_duration_s: float = 0.5
    monotone_tol_l: float = 1e-6


@dataclass(frozen=True)
class BlowCheck:
    accepted: bool
    reason: str | None = None

    def __bool__(self):
        return self.accepted


def ml_to_liters(raw_ml) -> np.ndarray:
    raw = np.asarray(raw_ml, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValidationError("volume in mL must be finite")
    if np.any(raw < 0):
        raise ValidationError("volume in mL must be nonnegative")
    return raw / 1000.0


def volume_to_flow(vt: VolumeTimeSeries) -> np.ndarray:
    """Forward-difference flow with the last value repeated (same length as input)."""
    v = vt.samples
    if v.size < 2:
        raise ValidationError("need at least two samples to differentiate")
    flow = np.empty_like(v)
    flow[:-1] = np.diff(v) / vt.sample_period_s
    flow[-1] = flow[-2]
    return flow


def check_blow_validity(vt: VolumeTimeSeries, criteria: BlowCriteria = BlowCriteria()) -> BlowCheck:
    v = vt.samples
    if v.size > 1 and np.min(np.diff(v)) < -criteria.monotone_tol_l:
        return BlowCheck(False, "non_monotone")
    if v[-1] - v[0] < criteria.min_volume_l:
        return BlowCheck(False, "too_small")
    if (v.size - 1) * vt.sample_period_s < criteria.min_duration_s:
        return BlowCheck(False, "too_short")
    return BlowCheck(True)


def make_flow_volume(vt: VolumeTimeSeries, criteria: BlowCriteria = BlowCriteria()) -> FlowVolumeCurve:
    check = check_blow_validity(vt, criteria)
    if not check:
        raise BlowRejected(check.reason, vt.subject_id)
    flow = volume_to_flow(vt)
    n = min(vt.samples.size, CURVE_LENGTH)
    volume = np.zeros(CURVE_LENGTH)
    padded_flow = np.zeros(CURVE_LENGTH)
    volume[:n] = vt.samples[:n]
    padded_flow[:n] = flow[:n]
    return FlowVolumeCurve(volume, padded_flow, n, vt.subject_id)


def derive_features(c: FlowVolumeCurve) -> SpiroFeatures:
    n = c.valid_len
    if n < 2:
        raise ValidationError("need at least two valid samples")
    vol = c.volume[:n]
    flow = c.flow[:n]
    fvc = float(vol[-1])
    if fvc <= 0:
        raise ValidationError("degenerate curve with zero FVC")
    fef = np.interp(np.array([0.25, 0.5, 0.75]) * fvc, vol, flow)
    one_second = int(round(1.0 / SAMPLE_PERIOD_S))
    fev1 = float(vol[one_second]) if n > one_second else fvc
    return SpiroFeatures(
        fvc=fvc,
        fev1=fev1,
        pef=float(np.max(flow)),
        fef25=float(fef[0]),
        fef50=float(fef[1]),
        fef75=float(fef[2]),
    )


def select_first_valid(
    blows: Iterable[VolumeTimeSeries], criteria: BlowCriteria = BlowCriteria()
) -> tuple[list[FlowVolumeCurve], dict[str, str]]:
    """Keep the earliest accepted blow per subject.

    Returns the curves in first-appearance order and a mapping of subjects with
    no accepted blow to the rejection reason of their last attempt.
    """
    curves: dict[str, FlowVolumeCurve] = {}
    rejected: dict[str, str] = {}
    for vt in blows:
        if vt.subject_id in curves:
            continue
        check = check_blow_validity(vt, criteria)
        if check:
            curves[vt.subject_id] = make_flow_volume(vt, criteria)
            rejected.pop(vt.subject_id, None)
        else:
            rejected[vt.subject_id] = check.reason
    return list(curves.values()), rejected


# --- CSV formats -----------------------------------------------------------


def _data_rows(path: Path):
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#") or row[0] == "subject_id":
                continue
            yield row


def read_blows_csv(path) -> list[VolumeTimeSeries]:
    """Read ``subject_id,period_ms,v0,v1,...`` rows (volumes in mL)."""
    out = []
    for row in _data_rows(Path(path)):
        values = [x for x in row[2:] if x != ""]
        out.append(
            VolumeTimeSeries(
                subject_id=row[0],
                samples=ml_to_liters(np.array(values, dtype=np.float64)),
                sample_period_s=float(row[1]) / 1000.0,
            )
        )
    return out


def blows_to_rows(blows: Sequence[VolumeTimeSeries]) -> tuple[list[str], list[list[str]]]:
    width = max(len(b) for b in blows)
    header = ["subject_id", "period_ms"] + [f"v{i}" for i in range(width)]
    rows = []
    for b in blows:
        ml = b.samples * 1000.0
        rows.append([b.subject_id, _fmt(b.sample_period_s * 1000.0)] + [_fmt(x) for x in ml])
    return header, rows


def _fmt(x) -> str:
    """Shortest text that reads back to the same liters value.

    Volumes recorded at 0.001 mL resolution print with three decimals, which
    absorbs the ulp error of the liters round trip; anything else falls back
    to ``repr``.
    """
    x = float(x)
    short = f"{x:.3f}"
    return short if float(short) / 1000.0 == x / 1000.0 else repr(x)


def curves_to_rows(curves: Sequence[FlowVolumeCurve]) -> tuple[list[str], list[list[str]]]:
    header = (
        ["subject_id", "valid_len"]
        + [f"volume_{i}" for i in range(CURVE_LENGTH)]
        + [f"flow_{i}" for i in range(CURVE_LENGTH)]
    )
    rows = []
    for c in curves:
        rows.append(
            [c.subject_id, str(c.valid_len)]
            + [repr(float(x)) for x in c.volume]
            + [repr(float(x)) for x in c.flow]
        )
    return header, rows


def read_curves_csv(path) -> list[FlowVolumeCurve]:
    out = []
    for row in _data_rows(Path(path)):
        data = np.array(row[2:], dtype=np.float64)
        if data.size != 2 * CURVE_LENGTH:
            raise ValidationError(f"curve row for {row[0]} has {data.size} values")
        out.append(FlowVolumeCurve(data[:CURVE_LENGTH], data[CURVE_LENGTH:], int(row[1]), row[0]))
    return out
