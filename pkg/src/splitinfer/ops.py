"""Forward and backward kernels for the layers used by the residual networks.

Every kernel is a pure function of its arguments.  Forward functions named
``*_forward`` return ``(output, cache)``; the matching ``*_backward`` takes the
upstream gradient and that cache and returns :class:`LayerGrads`.  The short
names (``conv2d``, ``relu``, ...) return the output only.

Kernels compute in the dtype of their input.  Networks feed float32; the
gradient checker feeds float64.

Convolution and dense layers are arranged so that each sample in a batch goes
through its own identically-shaped matrix product.  The result for one sample
therefore does not depend on what else is in the batch, which keeps cached
feature maps bitwise reproducible no matter how frames were grouped.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, InputError, SplitInferError

__all__ = [
    "BatchNormState",
    "LayerGrads",
    "NumericalError",
    "batchnorm",
    "batchnorm_backward",
    "batchnorm_forward",
    "conv2d",
    "conv2d_backward",
    "conv2d_direct",
    "conv2d_forward",
    "conv_output_size",
    "dense",
    "dense_backward",
    "dense_forward",
    "global_avg_pool",
    "global_avg_pool_backward",
    "global_avg_pool_forward",
    "maxpool2d",
    "maxpool2d_backward",
    "maxpool2d_forward",
    "relu",
    "relu_backward",
    "relu_forward",
    "softmax_cross_entropy",
]


class NumericalError(SplitInferError, ArithmeticError):
    """A kernel produced NaN or Inf."""


@dataclass(frozen=True)
class LayerGrads:
    grad_input: np.ndarray
    grad_params: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class BatchNormState:
    """Per-channel affine parameters and running statistics.

    ``momentum`` weighs the old running value: ``new = momentum * old + (1 - momentum) * batch``.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    def __post_init__(self):
        n = len(self.gamma)
        if not (len(self.beta) == len(self.running_mean) == len(self.running_var) == n):
            raise DimensionError("batchnorm state vectors must share one length")
        if not 0.0 < self.momentum < 1.0:
            raise ConfigurationError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.eps <= 0:
            raise ConfigurationError("eps must be positive")
        if np.any(self.running_var < 0):
            raise ConfigurationError("running_var must be non-negative")

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.9, eps: float = 1e-5, dtype=np.float32):
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return len(self.gamma)


def _finite(a: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(a).all():
        raise NumericalError(f"{where} produced non-finite values")
    return a


def _require_rank(x: np.ndarray, rank: int, name: str):
    if x.ndim != rank:
        raise DimensionError(f"{name} must have rank {rank}, got shape {x.shape}")


# -- convolution -------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    """Output length along one spatial axis.

    Windows that would start past the padded input are dropped (floor division),
    which is what makes the usual 3x3/stride-2/pad-1 downsampling legal on even
    sizes.  A size below one is a configuration error.
    """
    if stride < 1:
        raise ConfigurationError(f"stride must be positive, got {stride}")
    if pad < 0:
        raise ConfigurationError(f"pad must be non-negative, got {pad}")
    span = size + 2 * pad - k
    if span < 0:
        raise ConfigurationError(
            f"kernel {k} does not fit input {size} with pad {pad}"
        )
    return span // stride + 1


def _check_conv(x, w, b):
    _require_rank(x, 4, "conv input")
    _require_rank(w, 4, "conv weight")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"input channels (axis 1 of x) = {x.shape[1]} but weight in-channels (axis 1 of w) = {w.shape[1]}"
        )
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(
            f"bias shape {b.shape} does not match weight out-channels (axis 0 of w) = {w.shape[0]}"
        )


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if kh == 1 and kw == 1 and pad == 0:
        if stride != 1:
            x = x[:, :, ::stride, ::stride][:, :, :ho, :wo]
        return np.ascontiguousarray(x).reshape(n, c, ho * wo), ho, wo
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (n, c, ho, wo, kh, kw) -> (n, c, kh, kw, ho, wo)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return cols, ho, wo


def _col2im(gcols, x_shape, kh, kw, stride, pad, ho, wo):
    n, c, h, w = x_shape
    if kh == 1 and kw == 1 and pad == 0:
        g = gcols.reshape(n, c, ho, wo)
        if stride == 1:
            return g
        gx = np.zeros(x_shape, gcols.dtype)
        gx[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride] = g
        return gx
    g = gcols.reshape(n, c, kh, kw, ho, wo)
    gx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += g[:, :, i, j]
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return gx


def conv2d_forward(x, w, b=None, stride: int = 1, pad: int = 0):
    _check_conv(x, w, b)
    o, _, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    w2 = w.reshape(o, -1)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b[:, None]
    out = _finite(out.reshape(x.shape[0], o, ho, wo), "conv2d")
    return out, (x.shape, w, b is not None, cols, stride, pad, ho, wo)


def conv2d_backward(grad: np.ndarray, cache) -> LayerGrads:
    x_shape, w, has_bias, cols, stride, pad, ho, wo = cache
    n = x_shape[0]
    o, c, kh, kw = w.shape
    g = grad.reshape(n, o, ho * wo)
    gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    gcols = np.matmul(w.reshape(o, -1).T, g)
    gx = _col2im(gcols, x_shape, kh, kw, stride, pad, ho, wo)
    params = {"w": _finite(gw, "conv2d backward")}
    if has_bias:
        params["b"] = g.sum(axis=(0, 2))
    return LayerGrads(_finite(gx, "conv2d backward"), params)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation with zero padding; ``x`` is NCHW, ``w`` is OutC x InC x KH x KW."""
    return conv2d_forward(x, w, b, stride, pad)[0]


def conv2d_direct(x, w, b=None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Nested-loop reference convolution.

    Sums over input channel, then kernel row, then kernel column, in the
    input dtype.  Slow; meant for checking :func:`conv2d` on small shapes.
    """
    _check_conv(x, w, b)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.zeros((n, o, ho, wo), x.dtype)
    zero = x.dtype.type(0)
    for ni in range(n):
        for oc in range(o):
            for r in range(ho):
                for s in range(wo):
                    acc = zero
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc = acc + xp[ni, ci, r * stride + i, s * stride + j] * w[oc, ci, i, j]
                    if b is not None:
                        acc = acc + b[oc]
                    out[ni, oc, r, s] = acc
    return out


# -- batch normalisation -----------------------------------------------------


def _channel_sum(x: np.ndarray) -> np.ndarray:
    n, c = x.shape[:2]
    return x.reshape(n, c, -1).sum(axis=2).sum(axis=0)


def batchnorm_forward(x: np.ndarray, state: BatchNormState, mode: str = "infer"):
    """Returns ``(out, cache, new_state)``; ``new_state`` is ``state`` itself in infer mode."""
    _require_rank(x, 4, "batchnorm input")
    if x.shape[1] != state.channels:
        raise DimensionError(
            f"input channels (axis 1) = {x.shape[1]} but batchnorm state has {state.channels}"
        )
    dt = x.dtype
    gamma = state.gamma.astype(dt, copy=False)[None, :, None, None]
    beta = state.beta.astype(dt, copy=False)[None, :, None, None]
    if mode == "infer":
        inv_std = 1.0 / np.sqrt(state.running_var.astype(dt, copy=False) + dt.type(state.eps))
        scale = gamma * inv_std[None, :, None, None]
        out = (x - state.running_mean.astype(dt, copy=False)[None, :, None, None]) * scale + beta
        return _finite(out, "batchnorm"), None, state
    if mode != "train":
        raise ConfigurationError(f"batchnorm mode must be 'train' or 'infer', got {mode!r}")
    n, c, h, w = x.shape
    m = n * h * w
    if m < 2:
        raise ConfigurationError("train-mode batchnorm needs at least two values per channel")
    mean = _channel_sum(x) / dt.type(m)
    xc = x - mean[None, :, None, None]
    var = _channel_sum(xc * xc) / dt.type(m)
    inv_std = 1.0 / np.sqrt(var + dt.type(state.eps))
    xhat = xc
    xhat *= inv_std[None, :, None, None]
    out = xhat * gamma
    out += beta
    mom = state.momentum
    new_state = replace(
        state,
        running_mean=(mom * state.running_mean + (1 - mom) * mean).astype(state.running_mean.dtype),
        running_var=(mom * state.running_var + (1 - mom) * var * (m / (m - 1))).astype(state.running_var.dtype),
    )
    return _finite(out, "batchnorm"), (xhat, inv_std, gamma), new_state


def batchnorm_backward(grad: np.ndarray, cache) -> LayerGrads:
    if cache is None:
        raise ConfigurationError("batchnorm backward requires a train-mode forward")
    xhat, inv_std, gamma = cache
    n, c, h, w = xhat.shape
    m = grad.dtype.type(n * h * w)
    gbeta = _channel_sum(grad)
    ggamma = _channel_sum(grad * xhat)
    # d/dx of gamma * xhat + beta, folded into one pass over the activations
    gx = xhat * (ggamma / m)[None, :, None, None]
    np.subtract(grad, gx, out=gx)
    gx -= (gbeta / m)[None, :, None, None]
    gx *= gamma * inv_std[None, :, None, None]
    return LayerGrads(_finite(gx, "batchnorm backward"), {"gamma": ggamma, "beta": gbeta})


def batchnorm(x: np.ndarray, state: BatchNormState, mode: str = "infer"):
    """Returns ``(out, new_state)``."""
    out, _, new_state = batchnorm_forward(x, state, mode)
    return out, new_state


# -- elementwise and pooling -------------------------------------------------


def relu_forward(x: np.ndarray):
    return np.maximum(x, x.dtype.type(0)), x > 0


def relu_backward(grad: np.ndarray, cache) -> LayerGrads:
    return LayerGrads(grad * cache)


def relu(x: np.ndarray) -> np.ndarray:
    return relu_forward(x)[0]


def _pool_size(size: int, k: int, stride: int) -> int:
    if k < 1 or stride < 1:
        raise ConfigurationError("pool window and stride must be positive")
    span = size - k
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"maxpool k={k} s={stride} does not tile input size {size} (({size}-{k})/{stride}+1 is not a positive integer)"
        )
    return span // stride + 1


def maxpool2d_forward(x: np.ndarray, k: int, stride: int):
    _require_rank(x, 4, "maxpool input")
    n, c, h, w = x.shape
    ho, wo = _pool_size(h, k, stride), _pool_size(w, k, stride)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win.reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg, k, stride)


def maxpool2d_backward(grad: np.ndarray, cache) -> LayerGrads:
    x_shape, arg, k, stride = cache
    _, _, ho, wo = grad.shape
    gx = np.zeros(x_shape, grad.dtype)
    zero = grad.dtype.type(0)
    for i in range(k):
        for j in range(k):
            sel = np.where(arg == i * k + j, grad, zero)
            gx[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += sel
    return LayerGrads(gx)


def maxpool2d(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    return maxpool2d_forward(x, k, stride)[0]


def global_avg_pool_forward(x: np.ndarray):
    _require_rank(x, 4, "global_avg_pool input")
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(grad: np.ndarray, cache) -> LayerGrads:
    n, c, h, w = cache
    g = np.broadcast_to((grad / grad.dtype.type(h * w))[:, :, None, None], cache)
    return LayerGrads(np.ascontiguousarray(g))


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return global_avg_pool_forward(x)[0]


# -- dense head and loss -----------------------------------------------------


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    _require_rank(x, 2, "dense input")
    _require_rank(w, 2, "dense weight")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"input features (axis 1 of x) = {x.shape[1]} but weight features (axis 1 of w) = {w.shape[1]}"
        )
    if b.shape != (w.shape[0],):
        raise DimensionError(f"bias shape {b.shape} does not match weight rows {w.shape[0]}")
    out = np.matmul(x[:, None, :], w.T)[:, 0, :] + b
    return _finite(out, "dense"), (x, w)


def dense_backward(grad: np.ndarray, cache) -> LayerGrads:
    x, w = cache
    return LayerGrads(grad @ w, {"w": grad.T @ x, "b": grad.sum(axis=0)})


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return dense_forward(x, w, b)[0]


def softmax_cross_entropy(logits: np.ndarray, labels):
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``.

    Returns ``(loss, probs, grad_logits)`` with ``grad_logits = (probs - onehot) / N``.
    """
    _require_rank(logits, 2, "logits")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    probs = e / s
    rows = np.arange(n)
    loss = float(np.mean(np.log(s[:, 0]) - z[rows, labels]))
    grad = probs.copy()
    grad[rows, labels] -= 1
    grad /= logits.dtype.type(n)
    if not np.isfinite(loss):
        raise NumericalError("softmax_cross_entropy produced a non-finite loss")
    return loss, probs, grad
