"""Second-order gradient boosting for binary labels, plus exact TreeSHAP.

Trees are grown greedily on the gradient and hessian of the logistic loss
with exact split enumeration. Each node records how many training rows reached
it (``cover``); TreeSHAP uses those counts as the background distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .exceptions import FormatError, ParameterError, ValidationError

LEAF = -1
MODEL_FORMAT = "spiroembed-gbdt"
MODEL_VERSION = 1


@dataclass(frozen=True)
class GbdtParams:
    n_trees: int = 100
    max_depth: int = 3
    shrinkage: float = 0.1
    min_child_weight: float = 1.0
    reg_lambda: float = 1.0
    min_split_gain: float = 0.0
    subsample: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 0 or self.max_depth < 1:
            raise ParameterError("need n_trees >= 0 and max_depth >= 1")
        if self.shrinkage <= 0 or self.reg_lambda < 0 or self.min_child_weight < 0:
            raise ParameterError("shrinkage must be positive; reg_lambda and min_child_weight nonnegative")
        if not 0 < self.subsample <= 1:
            raise ParameterError("subsample must lie in (0, 1]")


@dataclass
class DecisionTree:
    """Array-encoded binary tree; rows with ``x[feature] < threshold`` go left."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray
    max_depth: int = 0

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] == LEAF

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row of ``X``."""
        X = np.atleast_2d(X)
        node = np.zeros(len(X), dtype=np.int64)
        for _ in range(self.max_depth + 1):
            internal = self.feature[node] != LEAF
            if not internal.any():
                break
            rows = np.nonzero(internal)[0]
            nd = node[rows]
            go_left = X[rows, self.feature[nd]] < self.threshold[nd]
            node[rows] = np.where(go_left, self.left[nd], self.right[nd])
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def expected_value(self) -> float:
        leaves = self.feature == LEAF
        return float(np.sum(self.value[leaves] * self.cover[leaves]) / self.cover[0])

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "cover": self.cover.tolist(),
            "max_depth": self.max_depth,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        return cls(
            feature=np.array(d["feature"], dtype=np.int64),
            threshold=np.array(d["threshold"], dtype=np.float64),
            left=np.array(d["left"], dtype=np.int64),
            right=np.array(d["right"], dtype=np.int64),
            value=np.array(d["value"], dtype=np.float64),
            cover=np.array(d["cover"], dtype=np.float64),
            max_depth=int(d["max_depth"]),
        )


@dataclass
class GbdtModel:
    base_score: float
    trees: list[DecisionTree]
    shrinkage: float
    feature_names: list[str]
    params: GbdtParams = field(default_factory=GbdtParams)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.n_features:
            raise ValidationError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X, single

    def raw_score(self, X) -> np.ndarray | float:
        X, single = self._check(X)
        total = np.zeros(len(X))
        for tree in self.trees:
            total += tree.predict(X)
        out = self.base_score + self.shrinkage * total
        return float(out[0]) if single else out

    def predict_proba(self, X) -> np.ndarray | float:
        raw = self.raw_score(X)
        return float(expit(raw)) if np.ndim(raw) == 0 else expit(raw)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "params": self.params.__dict__,
            "base_score": self.base_score,
            "shrinkage": self.shrinkage,
            "feature_names": list(self.feature_names),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbdtModel":
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise FormatError(f"unsupported tree model format {d.get('format')!r} v{d.get('version')}")
        return cls(
            base_score=float(d["base_score"]),
            trees=[DecisionTree.from_dict(t) for t in d["trees"]],
            shrinkage=float(d["shrinkage"]),
            feature_names=list(d["feature_names"]),
            params=GbdtParams(**d["params"]),
        )

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "GbdtModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def predict_proba(model: GbdtModel, x) -> np.ndarray | float:
    return model.predict_proba(x)


# --- training --------------------------------------------------------------


def _best_split(X, g, h, rows, params: GbdtParams):
    """Exact greedy search; ties go to the lowest feature, then the lowest threshold."""
    G, H = g[rows].sum(), h[rows].sum()
    lam = params.reg_lambda
    parent = G * G / (H + lam)
    best = (params.min_split_gain, None, None)
    for j in range(X.shape[1]):
        xs = X[rows, j]
        order = np.argsort(xs, kind="stable")
        xs = xs[order]
        gl = np.cumsum(g[rows][order])[:-1]
        hl = np.cumsum(h[rows][order])[:-1]
        distinct = xs[1:] > xs[:-1]
        ok = distinct & (hl >= params.min_child_weight) & (H - hl >= params.min_child_weight)
        if not ok.any():
            continue
        gain = gl**2 / (hl + lam) + (G - gl) ** 2 / (H - hl + lam) - parent
        gain = np.where(ok, gain, -np.inf)
        k = int(np.argmax(gain))  # first maximum = lowest threshold
        if gain[k] > best[0]:
            best = (float(gain[k]), j, 0.5 * (xs[k] + xs[k + 1]))
    return best


def _grow_tree(X, g, h, rows, params: GbdtParams) -> DecisionTree:
    feature, threshold, left, right, value, cover = [], [], [], [], [], []
    lam = params.reg_lambda

    def new_node(node_rows):
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(float(-g[node_rows].sum() / (h[node_rows].sum() + lam)))
        cover.append(float(len(node_rows)))
        return len(feature) - 1

    root = new_node(rows)
    frontier = [(root, rows, 0)]
    while frontier:
        node, node_rows, depth = frontier.pop(0)
        if depth >= params.max_depth or len(node_rows) < 2:
            continue
        _, j, thr = _best_split(X, g, h, node_rows, params)
        if j is None:
            continue
        mask = X[node_rows, j] < thr
        lrows, rrows = node_rows[mask], node_rows[~mask]
        feature[node], threshold[node] = j, thr
        left[node] = new_node(lrows)
        right[node] = new_node(rrows)
        value[node] = 0.0
        frontier.append((left[node], lrows, depth + 1))
        frontier.append((right[node], rrows, depth + 1))
    return DecisionTree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.array(value, dtype=np.float64),
        cover=np.array(cover, dtype=np.float64),
        max_depth=params.max_depth,
    )


def fit(X, y, params: GbdtParams = GbdtParams(), feature_names: Sequence[str] | None = None) -> GbdtModel:
    """Boost ``params.n_trees`` logistic-loss trees.

    Without row subsampling, boosting stops early when a tree cannot split
    its root, since every later tree would see the same gradients. With
    subsampling such a tree is skipped.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValidationError("need a nonempty 2-D feature matrix")
    if len(y) != len(X):
        raise ValidationError("labels and features differ in length")
    if np.isnan(X).any():
        raise ValidationError("features contain NaN")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0 or 1")
    prevalence = y.mean()
    if prevalence in (0.0, 1.0):
        raise ValidationError("both classes must be present")
    names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise ValidationError("feature_names length does not match X")

    base = float(np.log(prevalence / (1.0 - prevalence)))
    raw = np.full(len(y), base)
    rng = np.random.default_rng(params.seed)
    all_rows = np.arange(len(y))
    trees = []
    for _ in range(params.n_trees):
        p = expit(raw)
        g = p - y
        h = p * (1.0 - p)
        rows = all_rows
        if params.subsample < 1.0:
            k = max(2, int(round(params.subsample * len(y))))
            rows = np.sort(rng.choice(len(y), size=k, replace=False))
        tree = _grow_tree(X, g, h, rows, params)
        if tree.n_nodes == 1:
            if params.subsample < 1.0:
                continue
            break
        trees.append(tree)
        raw += params.shrinkage * tree.predict(X)
    return GbdtModel(base, trees, params.shrinkage, names, params)


# --- TreeSHAP --------------------------------------------------------------


@dataclass
class Attribution:
    """Log-odds Shapley values; ``base_value + phi.sum()`` is the raw score."""

    phi: np.ndarray
    base_value: float
    feature_names: list[str]

    @property
    def total(self) -> float:
        return float(self.base_value + self.phi.sum())


class _PathElem:
    __slots__ = ("feature", "zero", "one", "weight")

    def __init__(self, feature, zero, one, weight):
        self.feature = feature
        self.zero = zero
        self.one = one
        self.weight = weight

    def copy(self):
        return _PathElem(self.feature, self.zero, self.one, self.weight)


def _extend(path, zero, one, feature):
    depth = len(path)
    path.append(_PathElem(feature, zero, one, 1.0 if depth == 0 else 0.0))
    for i in range(depth - 1, -1, -1):
        path[i + 1].weight += one * path[i].weight * (i + 1) / (depth + 1)
        path[i].weight = zero * path[i].weight * (depth - i) / (depth + 1)


def _unwind(path, i):
    depth = len(path) - 1
    one, zero = path[i].one, path[i].zero
    n = path[depth].weight
    for j in range(depth - 1, -1, -1):
        if one != 0:
            t = path[j].weight
            path[j].weight = n * (depth + 1) / ((j + 1) * one)
            n = t - path[j].weight * zero * (depth - j) / (depth + 1)
        else:
            path[j].weight = path[j].weight * (depth + 1) / (zero * (depth - j))
    for j in range(i, depth):
        path[j].feature = path[j + 1].feature
        path[j].zero = path[j + 1].zero
        path[j].one = path[j + 1].one
    path.pop()


def _unwound_sum(path, i):
    depth = len(path) - 1
    one, zero = path[i].one, path[i].zero
    n = path[depth].weight
    total = 0.0
    if one != 0:
        for j in range(depth - 1, -1, -1):
            t = n / ((j + 1) * one)
            total += t
            n = path[j].weight - t * zero * (depth - j)
    else:
        for j in range(depth - 1, -1, -1):
            total += path[j].weight / (zero * (depth - j))
    return total * (depth + 1)


def _tree_shap(tree: DecisionTree, x: np.ndarray, phi: np.ndarray) -> None:
    def recurse(node, path, zero, one, feature):
        path = [p.copy() for p in path]
        _extend(path, zero, one, feature)
        if tree.is_leaf(node):
            for i in range(1, len(path)):
                w = _unwound_sum(path, i)
                phi[path[i].feature] += w * (path[i].one - path[i].zero) * tree.value[node]
            return
        f = int(tree.feature[node])
        if x[f] < tree.threshold[node]:
            hot, cold = tree.left[node], tree.right[node]
        else:
            hot, cold = tree.right[node], tree.left[node]
        incoming_zero, incoming_one = 1.0, 1.0
        for k in range(1, len(path)):
            if path[k].feature == f:
                incoming_zero, incoming_one = path[k].zero, path[k].one
                _unwind(path, k)
                break
        c = tree.cover[node]
        recurse(hot, path, incoming_zero * tree.cover[hot] / c, incoming_one, f)
        cold_zero = incoming_zero * tree.cover[cold] / c
        if cold_zero > 0:  # an empty cold branch carries no weight
            recurse(cold, path, cold_zero, 0.0, f)

    recurse(0, [], 1.0, 1.0, -1)


def tree_shap(model: GbdtModel, x) -> Attribution:
    """Exact path-dependent Shapley values of the raw (log-odds) score for one row."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.n_features,):
        raise ValidationError(f"expected a vector of {model.n_features} features")
    phi = np.zeros(model.n_features)
    base = model.base_score
    for tree in model.trees:
        if tree.cover is None or len(tree.cover) != tree.n_nodes or tree.cover[0] <= 0:
            raise ValidationError("tree lacks node cover counts")
        tree_phi = np.zeros(model.n_features)
        _tree_shap(tree, x, tree_phi)
        phi += model.shrinkage * tree_phi
        base += model.shrinkage * tree.expected_value()
    return Attribution(phi, float(base), list(model.feature_names))
