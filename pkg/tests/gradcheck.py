"""Finite-difference gradient checks shared by several test modules."""

import numpy as np

from oracles import central_difference, gradient_rel_error
from spiroembed import nn


def sample_indices(shape, k, rng):
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(k, size), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def check_network(net, params, x, rng, per_tensor=12):
    """Relative errors per parameter tensor (and the input) for a random linear readout."""
    out, _ = nn.forward(net, params, x)
    readout = rng.normal(size=out.shape)

    def loss():
        y, _ = nn.forward(net, params, x)
        return float(np.sum(y * readout))

    params.zero_grad()
    _, tape = nn.forward(net, params, x)
    dx = nn.backward(tape, readout)
    errors = {}
    for name in params.names():
        idx = sample_indices(params[name].shape, per_tensor, rng)
        analytic = [params.grads[name][i] for i in idx]
        numeric = [central_difference(loss, params.values[name], i) for i in idx]
        errors[name] = gradient_rel_error(analytic, numeric)
    idx = sample_indices(x.shape, per_tensor, rng)
    errors["input"] = gradient_rel_error([dx[i] for i in idx], [central_difference(loss, x, i) for i in idx])
    return errors
