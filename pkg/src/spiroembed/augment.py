"""Flow-volume augmentations and the two view distributions used in pretraining.

All operators act on the flow channel (horizontal stretch also resamples the
volume channel) and always return a full-length curve. Randomness is passed in
explicitly as a seed or a ``numpy.random.Generator``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import signal

from .exceptions import ParameterError
from .spiro import CURVE_LENGTH, FlowVolumeCurve

KINDS = ("gaussian_noise", "post_peak_amplify", "horizontal_stretch", "vertical_stretch", "downsample")
BUTTER_ORDER = 4


def _replace_valid_flow(c: FlowVolumeCurve, new_valid) -> FlowVolumeCurve:
    flow = np.zeros(CURVE_LENGTH)
    flow[: c.valid_len] = new_valid
    return c.with_arrays(flow=flow)


def gaussian_noise(c: FlowVolumeCurve, mu: float = 0.0, sigma: float = 0.05, seed=None) -> FlowVolumeCurve:
    if sigma < 0:
        raise ParameterError("sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    noise = rng.normal(mu, sigma, size=c.valid_len) if sigma > 0 else np.full(c.valid_len, float(mu))
    return _replace_valid_flow(c, c.flow[: c.valid_len] + noise)


def cosine_mask(window: int) -> np.ndarray:
    """Ramp 0 -> 1 over ``window`` samples: 0.5 - 0.5 cos(pi k / (W - 1)).

    Evaluated as 0.5 + 0.5 sin(pi (k / (W - 1) - 1/2)), which is exact at the
    start, middle and end of the window.
    """
    k = np.arange(window)
    return 0.5 + 0.5 * np.sin(np.pi * (k / (window - 1) - 0.5))


def post_peak_amplify(c: FlowVolumeCurve, delay: int, window: int, gamma: float) -> FlowVolumeCurve:
    if gamma <= 1:
        raise ParameterError("gamma must exceed 1")
    if window < 2 or delay < 0:
        raise ParameterError("window must be >= 2 and delay >= 0")
    peak = int(np.argmax(c.flow[: c.valid_len]))
    start = peak + delay
    if start + window > c.valid_len:
        raise ParameterError(
            f"amplification window [{start}, {start + window}) exceeds valid length {c.valid_len}"
        )
    flow = np.array(c.flow)
    flow[start : start + window] *= 1.0 + cosine_mask(window) * (gamma - 1.0)
    return c.with_arrays(flow=flow)


def horizontal_stretch(c: FlowVolumeCurve) -> FlowVolumeCurve:
    """Stretch the valid waveform over the full length: out[i] = in(beta * i), beta = L_valid / L."""
    n = c.valid_len
    if n < 2:
        raise ParameterError("horizontal stretch needs at least two valid samples")
    if n == CURVE_LENGTH:
        return c
    beta = n / CURVE_LENGTH
    pos = np.minimum(beta * np.arange(CURVE_LENGTH), n - 1)
    grid = np.arange(n)
    return c.with_arrays(
        volume=np.interp(pos, grid, c.volume[:n]),
        flow=np.interp(pos, grid, c.flow[:n]),
        valid_len=CURVE_LENGTH,
    )


def vertical_stretch(c: FlowVolumeCurve, alpha: float) -> FlowVolumeCurve:
    if not 0 < alpha < 1:
        raise ParameterError("alpha must lie in (0, 1)")
    return c.with_arrays(flow=c.flow * alpha)


def butterworth_lowpass(x, cutoff: float, order: int = BUTTER_ORDER) -> np.ndarray:
    """Causal Butterworth low-pass; ``cutoff`` is normalized to Nyquist.

    The filter state starts at the steady state for ``x[0]`` so a constant
    input passes through unchanged.
    """
    if not 0 < cutoff < 1:
        raise ParameterError("normalized cutoff must lie in (0, 1)")
    x = np.asarray(x, dtype=np.float64)
    sos = signal.butter(order, cutoff, btype="low", output="sos")
    zi = signal.sosfilt_zi(sos) * x[0]
    y, _ = signal.sosfilt(sos, x, zi=zi)
    return y


def downsample(c: FlowVolumeCurve, rho: float) -> FlowVolumeCurve:
    """Anti-alias at rho/2 of Nyquist, resample to ceil(rho * L_valid) points, then back."""
    if not 0 < rho < 1:
        raise ParameterError("downsample ratio must lie in (0, 1)")
    n = c.valid_len
    filtered = butterworth_lowpass(c.flow[:n], rho / 2)
    m = max(2, math.ceil(rho * n))
    if n < 2:
        return _replace_valid_flow(c, filtered)
    fine = np.linspace(0.0, n - 1, n)
    coarse = np.linspace(0.0, n - 1, m)
    intermediate = np.interp(coarse, fine, filtered)
    return _replace_valid_flow(c, np.interp(fine, coarse, intermediate))


@dataclass(frozen=True)
class AugmentSpec:
    """A fully parameterized augmentation."""

    kind: str
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown augmentation kind {self.kind!r}")

    def apply(self, c: FlowVolumeCurve, rng: np.random.Generator | None = None) -> FlowVolumeCurve:
        p = self.params
        if self.kind == "gaussian_noise":
            seed = p.get("seed")
            if seed is None:
                seed = rng if rng is not None else 0
            return gaussian_noise(c, p.get("mu", 0.0), p.get("sigma", 0.0), seed)
        if self.kind == "post_peak_amplify":
            return post_peak_amplify(c, int(p["delay"]), int(p["window"]), p["gamma"])
        if self.kind == "horizontal_stretch":
            return horizontal_stretch(c)
        if self.kind == "vertical_stretch":
            return vertical_stretch(c, p["alpha"])
        return downsample(c, p["rho"])


_INTEGER_PARAMS = {"delay", "window"}


@dataclass(frozen=True)
class AugmentTemplate:
    """An augmentation kind with uniform parameter ranges and a selection weight."""

    kind: str
    ranges: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    weight: float = 1.0

    def draw(self, c: FlowVolumeCurve, rng: np.random.Generator) -> AugmentSpec:
        params = {}
        for name in sorted(self.ranges):
            lo, hi = self.ranges[name]
            if name in _INTEGER_PARAMS:
                params[name] = int(rng.integers(int(lo), int(hi) + 1))
            else:
                params[name] = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        if self.kind == "gaussian_noise":
            params["seed"] = int(rng.integers(2**63))
        if self.kind == "post_peak_amplify":
            room = c.valid_len - int(np.argmax(c.flow[: c.valid_len]))
            if room < 2:
                return AugmentSpec("gaussian_noise", {"mu": 0.0, "sigma": 0.0})
            # shrink the window, then the delay, until it fits inside the valid region
            window = min(max(int(params.get("window", 2)), 2), room)
            params["window"] = window
            params["delay"] = min(int(params.get("delay", 0)), room - window)
        return AugmentSpec(self.kind, params)


@dataclass(frozen=True)
class AugmentDistribution:
    entries: Sequence[AugmentTemplate]

    def __post_init__(self):
        if not self.entries:
            raise ParameterError("augmentation distribution needs at least one entry")
        w = np.array([e.weight for e in self.entries], dtype=float)
        if np.any(w < 0) or w.sum() <= 0:
            raise ParameterError("augmentation weights must be nonnegative with a positive total")

    def sample(self, c: FlowVolumeCurve, rng: np.random.Generator) -> AugmentSpec:
        w = np.array([e.weight for e in self.entries], dtype=float)
        idx = int(rng.choice(len(self.entries), p=w / w.sum()))
        return self.entries[idx].draw(c, rng)

    @classmethod
    def identity(cls) -> "AugmentDistribution":
        """Zero-variance noise: every draw returns the input unchanged."""
        return cls([AugmentTemplate("gaussian_noise", {"mu": (0.0, 0.0), "sigma": (0.0, 0.0)})])

    @classmethod
    def default(cls) -> "AugmentDistribution":
        return cls(
            [
                AugmentTemplate("gaussian_noise", {"mu": (0.0, 0.0), "sigma": (0.02, 0.1)}),
                AugmentTemplate(
                    "post_peak_amplify", {"delay": (0, 40), "window": (20, 120), "gamma": (1.05, 1.4)}
                ),
                AugmentTemplate("horizontal_stretch", {}),
                AugmentTemplate("vertical_stretch", {"alpha": (0.7, 0.95)}),
                AugmentTemplate("downsample", {"rho": (0.2, 0.6)}),
            ]
        )


def sample_pair(
    c: FlowVolumeCurve, dist: AugmentDistribution, dist_prime: AugmentDistribution, rng: np.random.Generator
) -> tuple[FlowVolumeCurve, FlowVolumeCurve]:
    t1 = dist.sample(c, rng)
    t2 = dist_prime.sample(c, rng)
    return t1.apply(c), t2.apply(c)
