"""Show what each curve augmentation does to clinical landmarks.

Applies the five operators to one synthetic flow-volume curve and prints how
PEF, FEF25-75 and FVC move, then draws a few BYOL view pairs from the default
distribution.

    python demos/augmentation_gallery.py
"""

import numpy as np

from spiroembed.augment import (
    AugmentDistribution,
    downsample,
    gaussian_noise,
    horizontal_stretch,
    post_peak_amplify,
    sample_pair,
    vertical_stretch,
)
from spiroembed.spiro import derive_features
from spiroembed.synth import CohortConfig, generate_cohort

curve = generate_cohort(CohortConfig(n_subjects=10, seed=2))[0].curve


def describe(label, c):
    f = derive_features(c)
    print(f"{label:<28} valid_len {c.valid_len:4d}  PEF {f.pef:6.3f}  FEF25 {f.fef25:6.3f}  "
          f"FEF50 {f.fef50:6.3f}  FEF75 {f.fef75:6.3f}  FVC {f.fvc:5.3f}")


describe("original", curve)
describe("noise sigma=0.05", gaussian_noise(curve, 0.0, 0.05, seed=0))
describe("amplify delay 10, W 60, 1.3", post_peak_amplify(curve, 10, 60, 1.3))
describe("horizontal stretch", horizontal_stretch(curve))
describe("vertical stretch alpha=0.8", vertical_stretch(curve, 0.8))
describe("downsample rho=0.3", downsample(curve, 0.3))

rng = np.random.default_rng(0)
dist = AugmentDistribution.default()
print("\nview pairs from the default distribution:")
for i in range(4):
    a, b = sample_pair(curve, dist, dist, rng)
    gap = np.abs(a.flow - b.flow).max()
    print(f"  pair {i}: max |flow difference| {gap:.3f} L/s")
