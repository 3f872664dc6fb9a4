"""A small float64 network engine with a layer tape for reverse-mode gradients.

Networks are declared as lists of :class:`LayerSpec`. Parameters live in a
:class:`ParameterSet` keyed by ``"<prefix><layer index>.<name>"`` so several
networks (encoder, projector, predictor) can share one set.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import FormatError, NumericError, ParameterError, ShapeError, TapeError

LN_EPS = 1e-5
LAYER_KINDS = ("dense", "conv1d", "layer_norm", "relu", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0
    channels: int = 0
    kernel: int = 5
    stride: int = 2

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", units=units)


def conv1d(channels: int, kernel: int = 5, stride: int = 2) -> LayerSpec:
    return LayerSpec("conv1d", channels=channels, kernel=kernel, stride=stride)


def layer_norm() -> LayerSpec:
    return LayerSpec("layer_norm")


def relu() -> LayerSpec:
    return LayerSpec("relu")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def _same_padding(length: int, kernel: int, stride: int) -> tuple[int, int, int]:
    out = -(-length // stride)
    total = max((out - 1) * stride + kernel - length, 0)
    return out, total // 2, total - total // 2


class Network:
    """A layer stack with statically inferred shapes.

    ``input_shape`` excludes the batch axis: ``(features,)`` for dense stacks,
    ``(length, channels)`` for convolutional ones. Layer norm always
    normalizes over the trailing (feature or channel) axis.
    """

    def __init__(self, layers: Sequence[LayerSpec], input_shape: Sequence[int], prefix: str = ""):
        self.layers = tuple(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.prefix = prefix
        self.shapes = self._infer_shapes()

    def _infer_shapes(self) -> list[tuple[int, ...]]:
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            s = shapes[-1]
            if layer.kind == "dense":
                if len(s) != 1 or layer.units < 1:
                    raise ShapeError(f"layer {i}: dense needs a flat input, got {s}")
                s = (layer.units,)
            elif layer.kind == "conv1d":
                if len(s) != 2 or layer.channels < 1 or layer.kernel < 1 or layer.stride < 1:
                    raise ShapeError(f"layer {i}: conv1d needs (length, channels) input, got {s}")
                out, _, _ = _same_padding(s[0], layer.kernel, layer.stride)
                s = (out, layer.channels)
            elif layer.kind == "flatten":
                s = (int(np.prod(s)),)
            shapes.append(s)
        return shapes

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for i, layer in enumerate(self.layers):
            s = self.shapes[i]
            key = f"{self.prefix}{i}."
            if layer.kind == "dense":
                out[key + "W"] = (s[0], layer.units)
                out[key + "b"] = (layer.units,)
            elif layer.kind == "conv1d":
                out[key + "W"] = (layer.channels, s[1], layer.kernel)
                out[key + "b"] = (layer.channels,)
            elif layer.kind == "layer_norm":
                out[key + "gamma"] = (s[-1],)
                out[key + "beta"] = (s[-1],)
        return out

    def init_params(self, rng: np.random.Generator, params: "ParameterSet | None" = None) -> "ParameterSet":
        params = ParameterSet() if params is None else params
        for name, shape in self.param_shapes().items():
            leaf = name.rsplit(".", 1)[1]
            if leaf == "W":
                fan_in = int(np.prod(shape[1:])) if len(shape) == 3 else shape[0]
                params.add(name, rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
            elif leaf == "gamma":
                params.add(name, np.ones(shape))
            else:
                params.add(name, np.zeros(shape))
        return params

    def to_dict(self) -> dict:
        return {
            "layers": [asdict(layer) for layer in self.layers],
            "input_shape": list(self.input_shape),
            "prefix": self.prefix,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Network":
        return cls([LayerSpec(**layer) for layer in d["layers"]], d["input_shape"], d.get("prefix", ""))

    def __eq__(self, other):
        return isinstance(other, Network) and self.to_dict() == other.to_dict()


class ParameterSet:
    """Named parameters with gradient buffers and Adam moment state."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        self.version = 0

    def add(self, name: str, value) -> None:
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        self.version += 1

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def mark_mutated(self) -> None:
        self.version += 1

    def subset(self, prefixes: Iterable[str]) -> "ParameterSet":
        """Deep copy of the parameters whose names start with any of ``prefixes``."""
        prefixes = tuple(prefixes)
        out = ParameterSet()
        for name, value in self.values.items():
            if name.startswith(prefixes):
                out.add(name, value.copy())
        return out

    def copy(self) -> "ParameterSet":
        out = self.subset(("",))
        for name in self.values:
            out.m[name][...] = self.m[name]
            out.v[name][...] = self.v[name]
        out.step = self.step
        return out


@dataclass
class Tape:
    network: Network
    params: ParameterSet
    version: int
    caches: list


def _check_finite(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite activation after {where}")


def _conv_forward(layer, W, b, x):
    n, length, c = x.shape
    out, left, right = _same_padding(length, layer.kernel, layer.stride)
    xp = np.pad(x, ((0, 0), (left, right), (0, 0)))
    windows = sliding_window_view(xp, layer.kernel, axis=1)[:, :: layer.stride][:, :out]
    cols = windows.reshape(n, out, c * layer.kernel)
    y = cols @ W.reshape(W.shape[0], -1).T + b
    return y, (cols, xp.shape, left, length)


def _conv_backward(layer, W, cache, dy):
    cols, padded_shape, left, length = cache
    n, out, cout = dy.shape
    dW = (dy.reshape(-1, cout).T @ cols.reshape(-1, cols.shape[2])).reshape(W.shape)
    db = dy.sum(axis=(0, 1))
    dcols = (dy @ W.reshape(cout, -1)).reshape(n, out, W.shape[1], layer.kernel)
    dxp = np.zeros(padded_shape)
    span = layer.stride * (out - 1) + 1
    for j in range(layer.kernel):
        dxp[:, j : j + span : layer.stride, :] += dcols[:, :, :, j]
    return dxp[:, left : left + length, :], {"W": dW, "b": db}


def _ln_forward(gamma, beta, x):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = centered * inv_std
    return gamma * xhat + beta, (xhat, inv_std)


def _ln_backward(gamma, cache, dy):
    xhat, inv_std = cache
    reduce_axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=reduce_axes)
    dbeta = dy.sum(axis=reduce_axes)
    dxhat = dy * gamma
    dx = inv_std * (
        dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, {"gamma": dgamma, "beta": dbeta}


def forward(net: Network, params: ParameterSet, x) -> tuple[np.ndarray, Tape]:
    """Run ``net`` on a batch ``x`` of shape ``(batch,) + net.input_shape``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != net.input_shape:
        raise ShapeError(f"expected input shape (batch,) + {net.input_shape}, got {x.shape}")
    caches = []
    for i, layer in enumerate(net.layers):
        key = f"{net.prefix}{i}."
        if layer.kind == "dense":
            caches.append(x)
            x = x @ params[key + "W"] + params[key + "b"]
        elif layer.kind == "conv1d":
            x, cache = _conv_forward(layer, params[key + "W"], params[key + "b"], x)
            caches.append(cache)
        elif layer.kind == "layer_norm":
            x, cache = _ln_forward(params[key + "gamma"], params[key + "beta"], x)
            caches.append(cache)
        elif layer.kind == "relu":
            mask = x > 0
            caches.append(mask)
            x = x * mask
        else:
            caches.append(x.shape)
            x = x.reshape(x.shape[0], -1)
        _check_finite(x, f"layer {i} ({layer.kind})")
    return x, Tape(net, params, params.version, caches)


def backward(tape: Tape, upstream) -> np.ndarray:
    """Accumulate parameter gradients into ``tape.params.grads``; return d/d(input)."""
    net, params = tape.network, tape.params
    if params.version != tape.version:
        raise TapeError("parameters changed since this tape was recorded")
    dy = np.asarray(upstream, dtype=np.float64)
    for i in range(len(net.layers) - 1, -1, -1):
        layer, cache = net.layers[i], tape.caches[i]
        key = f"{net.prefix}{i}."
        grads = {}
        if layer.kind == "dense":
            grads = {"W": cache.T @ dy, "b": dy.sum(axis=0)}
            dy = dy @ params[key + "W"].T
        elif layer.kind == "conv1d":
            dy, grads = _conv_backward(layer, params[key + "W"], cache, dy)
        elif layer.kind == "layer_norm":
            dy, grads = _ln_backward(params[key + "gamma"], cache, dy)
        elif layer.kind == "relu":
            dy = dy * cache
        else:
            dy = dy.reshape(cache)
        for leaf, g in grads.items():
            params.grads[key + leaf] += g
    return dy


def adam_step(
    params: ParameterSet,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update applied in place to every parameter."""
    if lr <= 0:
        raise ParameterError("learning rate must be positive")
    params.step += 1
    t = params.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, w in params.values.items():
        g = params.grads[name]
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        w -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    params.mark_mutated()


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` (a vector, or each row of a matrix) to unit Euclidean norm."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise NumericError("cannot normalize a zero vector")
    return v / norm


# --- checkpoint files ------------------------------------------------------

CHECKPOINT_MAGIC = b"SPIROCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ParameterSet, header: dict, names: Sequence[str] | None = None) -> None:
    """Write a JSON header followed by little-endian float64 arrays.

    Layout: magic, u32 header length, header JSON (UTF-8), raw arrays in
    ``names`` order. The header records each array's name and shape.
    """
    names = list(params.names() if names is None else names)
    full = dict(header)
    full["format_version"] = CHECKPOINT_VERSION
    full["arrays"] = [{"name": n, "shape": list(params[n].shape)} for n in names]
    blob = json.dumps(full, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[ParameterSet, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path} is not a checkpoint file")
    offset = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, offset)
    offset += 4
    header = json.loads(data[offset : offset + hlen].decode())
    offset += hlen
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('format_version')}")
    params = ParameterSet()
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"]))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(entry["shape"])
        params.add(entry["name"], arr.astype(np.float64))
        offset += 8 * count
    if offset != len(data):
        raise FormatError(f"{path} has {len(data) - offset} trailing bytes")
    return params, header
