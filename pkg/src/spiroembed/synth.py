"""Deterministic synthetic cohort with a tunable spirogram-to-label link.

Each subject gets demographics, a latent severity ``s`` and a forced
expiration simulated from a flow-volume template. Severity lowers RVEF; the
effect size ``lam`` controls how much of it shows up as mid-expiratory
scooping of the curve. With ``lam = 0`` the curve carries no information about
the label beyond what the demographics already provide.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .cohort import DemographicVector, SubjectRecord
from .exceptions import ValidationError
from .spiro import SAMPLE_PERIOD_S, VolumeTimeSeries, make_flow_volume

MAX_SAMPLES = 1200
END_FLOW_LPS = 0.05
CALIBRATION_SIZE = 20000

DEFAULT_RISK_WEIGHTS = {
    "age_per_decade": 1.5,
    "sex": 3.0,
    "copd": 2.0,
    "obesity": 1.0,
    "hypertension": 1.0,
    "diabetes": 1.0,
    "ckd": 2.0,
    "chd": 1.5,
    "vhd": 2.0,
}


@dataclass(frozen=True)
class CohortConfig:
    n_subjects: int = 4000
    positive_rate: float = 0.2
    effect_size: float = 1.0
    risk_weights: dict = field(default_factory=lambda: dict(DEFAULT_RISK_WEIGHTS))
    severity_weight: float = 5.0
    rvef_noise: float = 3.0
    scoop_gain: float = 0.6
    scoop_noise: float = 0.15
    flow_noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 10:
            raise ValidationError("n_subjects must be at least 10")
        if not 0 < self.positive_rate < 1:
            raise ValidationError("positive_rate must lie in (0, 1)")
        if not 0 <= self.effect_size <= 1:
            raise ValidationError("effect_size must lie in [0, 1]")


def subject_rng(seed: int, index: int, stream: str = "subject") -> np.random.Generator:
    """Independent generator per (cohort seed, subject index, stream)."""
    digest = hashlib.sha256(f"{seed}:{stream}:{index}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _sample_demographics(rng: np.random.Generator) -> DemographicVector:
    age = int(np.clip(round(rng.normal(55.0, 8.0)), 18, 90))
    sex = int(rng.random() < 0.45)
    smoke = int(rng.random() < 0.54)
    copd = int(rng.random() < 0.08 + 0.08 * smoke)
    bmi = float(np.round(rng.normal(26.6, 4.2), 1))
    older = age >= 60
    return DemographicVector(
        age=age,
        sex=sex,
        smoke=smoke,
        copd=copd,
        obesity=int(bmi >= 30),
        hypertension=int(rng.random() < 0.14 + 0.08 * older),
        diabetes=int(rng.random() < 0.03),
        ckd=int(rng.random() < 0.02),
        chd=int(rng.random() < 0.03 + 0.02 * sex),
        vhd=int(rng.random() < 0.015),
        bmi=bmi,
    )


def demographic_risk(demo: DemographicVector, weights: dict) -> float:
    """RVEF reduction (percentage points) attributable to demographics."""
    risk = weights.get("age_per_decade", 0.0) * (demo.age - 55) / 10.0
    for name in ("sex", "copd", "obesity", "hypertension", "diabetes", "ckd", "chd", "vhd", "smoke"):
        risk += weights.get(name, 0.0) * getattr(demo, name)
    return risk


def calibrate_baseline(config: CohortConfig) -> float:
    """Mean RVEF at zero risk such that the expected positive rate hits the target."""
    rng = subject_rng(config.seed, 0, "calibration")
    risks = np.array([demographic_risk(_sample_demographics(rng), config.risk_weights)
                      for _ in range(CALIBRATION_SIZE)])
    sd = np.hypot(config.severity_weight, config.rvef_noise)

    def excess(base):
        return stats.norm.cdf((45.0 - base + risks) / sd).mean() - config.positive_rate

    lo, hi = 20.0, 100.0
    if excess(lo) * excess(hi) > 0:
        raise ValidationError(f"positive_rate {config.positive_rate} infeasible with these weights")
    return float(optimize.brentq(excess, lo, hi, xtol=1e-10))


def _simulate_blows(fvc, pef, peak_frac, scoop, noise, period=SAMPLE_PERIOD_S):
    """Integrate dV/dt = f(V / FVC) for many subjects at once.

    Flow rises to PEF at ``peak_frac`` of FVC and then decays as
    ``((1 - u) / (1 - peak_frac)) ** scoop``; exponents above 1 scoop the
    descending limb. Returns volumes (L) of shape
    (subjects, MAX_SAMPLES) and per-subject lengths.
    """
    n = len(fvc)
    volume = np.zeros((n, MAX_SAMPLES))
    length = np.full(n, MAX_SAMPLES)
    active = np.ones(n, dtype=bool)
    v = np.zeros(n)
    for i in range(1, MAX_SAMPLES):
        u = np.clip(v / fvc, 0.0, 1.0)
        rising = pef * (0.3 + 0.7 * np.sin(0.5 * np.pi * np.minimum(u / peak_frac, 1.0)))
        falling = pef * np.clip((1.0 - u) / (1.0 - peak_frac), 0.0, None) ** scoop
        flow = np.where(u < peak_frac, rising, falling) * noise[:, i]
        ended = active & (flow < END_FLOW_LPS)
        length[ended] = i
        active &= ~ended
        v = np.where(active, v + flow * period, v)
        volume[:, i] = v
        if not active.any():
            break
    return volume, length


def generate_cohort(config: CohortConfig = CohortConfig()) -> list[SubjectRecord]:
    base = calibrate_baseline(config)
    lam = config.effect_size
    demos, severity, rvef, lvef = [], [], [], []
    fvc, pef, peak_frac, scoop, noise = [], [], [], [], []
    for idx in range(config.n_subjects):
        rng = subject_rng(config.seed, idx)
        demo = _sample_demographics(rng)
        s = rng.normal()
        ef = base - demographic_risk(demo, config.risk_weights) - config.severity_weight * s
        ef += rng.normal(0.0, config.rvef_noise)
        r = float(np.clip(ef, 5.0, 95.0))
        lv = float(np.clip(62.0 + 0.5 * (r - base) + rng.normal(0.0, 5.0), 10.0, 85.0))
        age_decline = max(demo.age - 40, 0)
        fvc.append((3.5 + 1.3 * demo.sex - 0.025 * age_decline) * np.exp(rng.normal(0.0, 0.1)))
        pef.append((7.0 + 2.5 * demo.sex - 0.04 * age_decline) * np.exp(rng.normal(0.0, 0.1)))
        peak_frac.append(rng.uniform(0.08, 0.15))
        shape = config.scoop_gain * lam * s + config.scoop_noise * rng.normal() + 0.3 * demo.copd
        scoop.append(0.8 + 0.6 * np.exp(shape))
        noise.append(np.exp(rng.normal(0.0, config.flow_noise, size=MAX_SAMPLES)))
        demos.append(demo)
        severity.append(s)
        rvef.append(round(r, 2))
        lvef.append(round(lv, 2))

    volume, length = _simulate_blows(
        np.array(fvc), np.array(pef), np.array(peak_frac), np.array(scoop), np.array(noise)
    )
    records = []
    for idx, demo in enumerate(demos):
        sid = f"S{idx:06d}"
        ml = np.round(volume[idx, : length[idx]] * 1000.0, 3)
        blow = VolumeTimeSeries(sid, ml / 1000.0)
        curve = make_flow_volume(blow)
        lhf = int(lvef[idx] < 50.0)
        demo = DemographicVector(**{**demo.__dict__, "lhf": lhf})
        records.append(SubjectRecord.build(sid, curve, demo, rvef[idx], lvef[idx], blow))
    return records
