"""Slow, independent reference implementations used to check the library.

Nothing here imports the code under test except for plain data containers.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def pairwise_auroc(scores, labels) -> float:
    """O(n^2) count over every positive/negative pair; ties score one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def forward_difference(v, dt):
    out = []
    for i in range(len(v) - 1):
        out.append((v[i + 1] - v[i]) / dt)
    out.append(out[-1])
    return np.array(out)


def butterworth_gain(freq_cycles_per_sample, cutoff_cycles_per_sample, order=4):
    """Magnitude of a bilinear-transformed analog Butterworth low-pass filter.

    ``|H|^2 = 1 / (1 + (tan(pi f) / tan(pi fc))^(2N))``, frequencies in cycles per sample.
    """
    r = math.tan(math.pi * freq_cycles_per_sample) / math.tan(math.pi * cutoff_cycles_per_sample)
    return 1.0 / math.sqrt(1.0 + r ** (2 * order))


def sinusoid_gain(filter_fn, freq, n=6000, settle=3000):
    """Steady-state amplitude ratio of ``filter_fn`` on a unit sinusoid.

    Fits sin/cos amplitudes by least squares after the transient has decayed.
    """
    t = np.arange(n)
    x = np.sin(2 * np.pi * freq * t)
    y = filter_fn(x)[settle:]
    basis = np.stack([np.sin(2 * np.pi * freq * t[settle:]), np.cos(2 * np.pi * freq * t[settle:])], axis=1)
    coef, *_ = np.linalg.lstsq(basis, y, rcond=None)
    return float(np.hypot(*coef))


class ScalarAdam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = 0.0
        self.t = 0

    def step(self, w, g):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        return w - self.lr * mhat / (math.sqrt(vhat) + self.eps)


def central_difference(f, array, index, h=1e-5):
    """d f / d array[index] by central differences, restoring the entry afterwards."""
    old = array[index]
    array[index] = old + h
    up = f()
    array[index] = old - h
    down = f()
    array[index] = old
    return (up - down) / (2 * h)


def gradient_rel_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(np.linalg.norm(analytic - numeric) / scale)


def walk_tree(tree, x) -> float:
    node = 0
    while tree.feature[node] >= 0:
        node = tree.left[node] if x[tree.feature[node]] < tree.threshold[node] else tree.right[node]
    return float(tree.value[node])


def raw_score_by_walk(model, x) -> float:
    return model.base_score + model.shrinkage * sum(walk_tree(t, x) for t in model.trees)


def _conditional_tree_value(tree, x, subset) -> float:
    def rec(node):
        f = tree.feature[node]
        if f < 0:
            return float(tree.value[node])
        if f in subset:
            child = tree.left[node] if x[f] < tree.threshold[node] else tree.right[node]
            return rec(child)
        left, right = tree.left[node], tree.right[node]
        return (tree.cover[left] * rec(left) + tree.cover[right] * rec(right)) / tree.cover[node]

    return rec(0)


def brute_force_shapley(model, x):
    """Enumerate every feature subset under the cover-weighted conditional expectation."""
    m = model.n_features

    def value(subset):
        return model.base_score + model.shrinkage * sum(_conditional_tree_value(t, x, subset) for t in model.trees)

    cache = {}
    for r in range(m + 1):
        for s in itertools.combinations(range(m), r):
            cache[frozenset(s)] = value(frozenset(s))
    phi = np.zeros(m)
    for i in range(m):
        others = [j for j in range(m) if j != i]
        for r in range(m):
            w = math.factorial(r) * math.factorial(m - r - 1) / math.factorial(m)
            for s in itertools.combinations(others, r):
                s = frozenset(s)
                phi[i] += w * (cache[s | {i}] - cache[s])
    return phi, cache[frozenset()]


def permutation_ranksum_pvalue(a, b, n_shuffles=10_000, seed=0) -> float:
    """Two-sided Monte Carlo p-value for the difference in mean ranks."""
    rng = np.random.default_rng(seed)
    pooled = np.concatenate([a, b])
    order = np.argsort(pooled, kind="mergesort")
    ranks = np.empty(len(pooled))
    ranks[order] = np.arange(1, len(pooled) + 1)
    # average tied ranks
    for v in np.unique(pooled):
        idx = pooled == v
        ranks[idx] = ranks[idx].mean()
    expected = len(a) * (len(pooled) + 1) / 2.0
    observed = abs(ranks[: len(a)].sum() - expected)
    hits = 0
    for _ in range(n_shuffles):
        perm = rng.permutation(len(pooled))
        if abs(ranks[perm[: len(a)]].sum() - expected) >= observed - 1e-9:
            hits += 1
    return (hits + 1) / (n_shuffles + 1)


def dense_features(volume, flow, valid_len, factor=100):
    """Landmarks from a curve resampled ``factor`` times more finely."""
    vol = np.asarray(volume[:valid_len])
    fl = np.asarray(flow[:valid_len])
    t = np.arange(valid_len)
    fine_t = np.linspace(0, valid_len - 1, (valid_len - 1) * factor + 1)
    fine_v = np.interp(fine_t, t, vol)
    fine_f = np.interp(fine_t, t, fl)
    fvc = vol[-1]
    out = {"fvc": fvc, "pef": fine_f.max()}
    for pct in (25, 50, 75):
        out[f"fef{pct}"] = float(np.interp(pct / 100 * fvc, fine_v, fine_f))
    out["fev1"] = float(np.interp(100, fine_t, fine_v)) if valid_len > 100 else fvc
    return out
