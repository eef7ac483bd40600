"""Central-difference checks of every backward kernel.

Each kernel is wrapped as ``f(values) -> (out, vjp)`` where ``vjp(upstream)``
returns gradients keyed like ``values``.  Non-scalar outputs are reduced to a
scalar with a fixed random projection so one backward pass covers every
coordinate.  The checks run in float64; the kernels keep the input dtype, so
the same code is exercised as in float32 training.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import ops
from .errors import ConfigurationError

# Acceptance bounds per layer; the default applies to the rest.
TOLERANCE = {"dense": 1e-4, "softmax_cross_entropy": 1e-4, "relu": 1e-5}
DEFAULT_TOLERANCE = 1e-3


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def finite_diff_gradcheck(kernel, values: dict[str, np.ndarray], epsilon: float = 1e-3, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients over all coordinates."""
    if not 1e-6 <= epsilon <= 1e-2:
        raise ConfigurationError(f"epsilon must lie in [1e-6, 1e-2], got {epsilon}")
    values = {k: np.array(v, np.float64) for k, v in values.items()}
    out, vjp = kernel(values)
    proj = np.random.default_rng(seed).standard_normal(np.shape(out))

    def scalar(vals):
        return float(np.sum(np.asarray(kernel(vals)[0]) * proj))

    analytic = vjp(proj)
    worst = 0.0
    for name, v in values.items():
        numeric = np.zeros_like(v)
        for i in np.ndindex(v.shape):
            orig = v[i]
            v[i] = orig + epsilon
            up = scalar(values)
            v[i] = orig - epsilon
            down = scalar(values)
            v[i] = orig
            numeric[i] = (up - down) / (2 * epsilon)
        worst = max(worst, relative_error(analytic[name], numeric))
    return worst


# -- kernel wrappers ---------------------------------------------------------


def _conv(stride, pad):
    def kernel(v):
        out, cache = ops.conv2d_forward(v["x"], v["w"], v["b"], stride, pad)

        def vjp(g):
            lg = ops.conv2d_backward(g, cache)
            return {"x": lg.grad_input, "w": lg.grad_params["w"], "b": lg.grad_params["b"]}

        return out, vjp

    return kernel


def _batchnorm(v):
    c = v["x"].shape[1]
    state = replace(ops.BatchNormState.fresh(c, dtype=np.float64), gamma=v["gamma"], beta=v["beta"])
    out, cache, _ = ops.batchnorm_forward(v["x"], state, "train")

    def vjp(g):
        lg = ops.batchnorm_backward(g, cache)
        return {"x": lg.grad_input, "gamma": lg.grad_params["gamma"], "beta": lg.grad_params["beta"]}

    return out, vjp


def _dense(v):
    out, cache = ops.dense_forward(v["x"], v["w"], v["b"])

    def vjp(g):
        lg = ops.dense_backward(g, cache)
        return {"x": lg.grad_input, **lg.grad_params}

    return out, vjp


def _unary(fwd, bwd):
    def kernel(v):
        out, cache = fwd(v["x"])
        return out, lambda g: {"x": bwd(g, cache).grad_input}

    return kernel


def _maxpool(v):
    out, cache = ops.maxpool2d_forward(v["x"], 2, 2)
    return out, lambda g: {"x": ops.maxpool2d_backward(g, cache).grad_input}


def _softmax_ce(labels):
    def kernel(v):
        loss, _, grad = ops.softmax_cross_entropy(v["x"], labels)
        return np.float64(loss), lambda g: {"x": grad * g}

    return kernel


def standard_cases(seed: int = 0):
    """``(name, kernel, values)`` for every layer type the networks use."""
    rng = np.random.default_rng(seed)
    r = rng.standard_normal
    away = rng.uniform(0.1, 1.0, (2, 3, 4, 4)) * rng.choice([-1.0, 1.0], (2, 3, 4, 4))
    # distinct values at least 0.05 apart so no window max changes under the perturbation
    spaced = rng.permutation(32).reshape(1, 2, 4, 4) * 0.05
    return [
        ("conv2d", _conv(1, 1), {"x": r((1, 2, 5, 5)), "w": r((3, 2, 3, 3)), "b": r(3)}),
        ("conv2d_stride2", _conv(2, 1), {"x": r((2, 2, 6, 6)), "w": r((3, 2, 3, 3)), "b": r(3)}),
        ("batchnorm", _batchnorm, {"x": r((2, 4, 3, 3)), "gamma": 1 + 0.1 * r(4), "beta": r(4)}),
        ("dense", _dense, {"x": r((2, 6)), "w": r((3, 6)), "b": r(3)}),
        ("relu", _unary(ops.relu_forward, ops.relu_backward), {"x": away}),
        ("maxpool2d", _maxpool, {"x": spaced}),
        ("global_avg_pool", _unary(ops.global_avg_pool_forward, ops.global_avg_pool_backward), {"x": r((2, 3, 4, 4))}),
        ("softmax_cross_entropy", _softmax_ce(np.array([0, 2, 1, 4])), {"x": r((4, 5))}),
    ]


def run_gradcheck(seed: int = 0, epsilon: float = 1e-3) -> dict[str, tuple[float, float]]:
    """Map layer name to ``(max_relative_error, tolerance)``."""
    return {
        name: (finite_diff_gradcheck(kernel, values, epsilon, seed), TOLERANCE.get(name.split("_stride")[0], DEFAULT_TOLERANCE))
        for name, kernel, values in standard_cases(seed)
    }
