"""Residual network construction and staged execution.

A network runs as a sequence of *stages*: stage 0 is the stem, stage ``i``
(1-based) is block ``i``, and the head (global average pool + dense) follows
the last block.  A cut at ``block_index = k`` splits the network after stage
``k``; the prefix runs stages ``0..k`` and the suffix runs ``k+1..n`` plus the
head.  Full inference is literally prefix followed by suffix, so the split is
exact to the bit.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ConfigurationError, CutError, DimensionError
from ..ops import (
    BatchNormState,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    global_avg_pool_backward,
    global_avg_pool_forward,
    maxpool2d_backward,
    maxpool2d_forward,
    relu_backward,
    relu_forward,
)
from .spec import CutPoint, ModelSpec, activation_shape


@dataclass
class Network:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    bn_states: dict[str, BatchNormState] = field(default_factory=dict)

    def copy(self) -> "Network":
        return Network(
            self.spec,
            {k: v.copy() for k, v in self.params.items()},
            {
                k: replace(s, gamma=s.gamma.copy(), beta=s.beta.copy(),
                           running_mean=s.running_mean.copy(), running_var=s.running_var.copy())
                for k, s in self.bn_states.items()
            },
        )

    def trainable(self) -> dict[str, np.ndarray]:
        """Weights plus batchnorm gamma/beta under ``<bn>.gamma`` / ``<bn>.beta``."""
        out = dict(self.params)
        for name, st in self.bn_states.items():
            out[name + ".gamma"] = st.gamma
            out[name + ".beta"] = st.beta
        return out

    def set_trainable(self, values: dict[str, np.ndarray]) -> None:
        for name, v in values.items():
            if name in self.params:
                self.params[name] = v
                continue
            bn, _, attr = name.rpartition(".")
            if bn not in self.bn_states or attr not in ("gamma", "beta"):
                raise KeyError(name)
            self.bn_states[bn] = replace(self.bn_states[bn], **{attr: v})


def stage_of(spec: ModelSpec, name: str) -> int:
    """Stage index owning a parameter or batchnorm name; the head is ``num_blocks + 1``."""
    root = name.split(".", 1)[0]
    if root == "stem":
        return 0
    if root == "head":
        return spec.num_blocks + 1
    if root.startswith("block"):
        return int(root[5:])
    raise KeyError(name)


def param_layout(spec: ModelSpec):
    """Ordered ``(conv_shapes, bn_channels)`` implied by ``spec``.

    ``conv_shapes`` maps every weight name (convs and head) to its shape.
    """
    convs: dict[str, tuple[int, ...]] = {}
    bns: dict[str, int] = {}
    c_in = spec.input_shape[0]
    s = spec.stem
    convs["stem.conv.w"] = (s.out_channels, c_in, s.k, s.k)
    bns["stem.bn"] = s.out_channels
    for i, b in enumerate(spec.blocks, 1):
        p = f"block{i}"
        m = b.mid_channels
        if b.kind == "basic":
            convs[f"{p}.conv1.w"] = (m, b.in_channels, 3, 3)
            bns[f"{p}.bn1"] = m
            convs[f"{p}.conv2.w"] = (b.out_channels, m, 3, 3)
            bns[f"{p}.bn2"] = b.out_channels
        else:
            convs[f"{p}.conv1.w"] = (m, b.in_channels, 1, 1)
            bns[f"{p}.bn1"] = m
            convs[f"{p}.conv2.w"] = (m, m, 3, 3)
            bns[f"{p}.bn2"] = m
            convs[f"{p}.conv3.w"] = (b.out_channels, m, 1, 1)
            bns[f"{p}.bn3"] = b.out_channels
        if b.projection:
            convs[f"{p}.proj.w"] = (b.out_channels, b.in_channels, 1, 1)
            bns[f"{p}.proj_bn"] = b.out_channels
    convs["head.w"] = (spec.num_classes, spec.head_features)
    return convs, bns


def init_param(name: str, shape: tuple[int, ...], seed: int) -> np.ndarray:
    """He-normal draw for one tensor, seeded by ``(seed, name)`` so any subset can be redrawn alone."""
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def initialize_stages(net: Network, stages, seed: int) -> None:
    """Redraw weights and reset batchnorm for every parameter in ``stages`` (in place)."""
    stages = set(stages)
    convs, bns = param_layout(net.spec)
    for name, shape in convs.items():
        if stage_of(net.spec, name) in stages:
            net.params[name] = init_param(name, shape, seed)
    if net.spec.num_blocks + 1 in stages:
        net.params["head.b"] = np.zeros(net.spec.num_classes, np.float32)
    for name, ch in bns.items():
        if stage_of(net.spec, name) in stages:
            net.bn_states[name] = BatchNormState.fresh(ch)


def build_network(spec: ModelSpec, seed: int = 0) -> Network:
    net = Network(spec, {}, {})
    initialize_stages(net, range(spec.num_blocks + 2), seed)
    convs, bns = param_layout(spec)
    net.params = {k: net.params[k] for k in [*convs, "head.b"]}
    net.bn_states = {k: net.bn_states[k] for k in bns}
    return net


# -- forward pieces ----------------------------------------------------------
# Each piece returns its output and, when a tape is given, appends
# (backward_fn, cache) so that backward() can replay it in reverse.


def _conv_bn(net, x, conv, bn, stride, pad, mode):
    y, cc = conv2d_forward(x, net.params[conv + ".w"], None, stride, pad)
    z, bc, new = batchnorm_forward(y, net.bn_states[bn], mode)
    if mode == "train":
        net.bn_states[bn] = new
    return z, (conv, bn, cc, bc)


def _conv_bn_back(g, cache, grads):
    conv, bn, cc, bc = cache
    lb = batchnorm_backward(g, bc)
    grads[bn + ".gamma"] = lb.grad_params["gamma"]
    grads[bn + ".beta"] = lb.grad_params["beta"]
    lc = conv2d_backward(lb.grad_input, cc)
    grads[conv + ".w"] = lc.grad_params["w"]
    return lc.grad_input


def _stem(net, x, mode, tape):
    s = net.spec.stem
    z, c1 = _conv_bn(net, x, "stem.conv", "stem.bn", s.stride, s.pad, mode)
    z, r = relu_forward(z)
    pc = None
    if s.pool_k is not None:
        z, pc = maxpool2d_forward(z, s.pool_k, s.pool_stride)
    if tape is not None:
        tape.append((_stem_back, (c1, r, pc)))
    return z


def _stem_back(g, cache, grads):
    c1, r, pc = cache
    if pc is not None:
        g = maxpool2d_backward(g, pc).grad_input
    g = relu_backward(g, r).grad_input
    return _conv_bn_back(g, c1, grads)


def _block(net, i, x, mode, tape):
    b = net.spec.blocks[i - 1]
    p = f"block{i}"
    caches = []
    if b.kind == "basic":
        h, c = _conv_bn(net, x, f"{p}.conv1", f"{p}.bn1", b.stride, 1, mode)
        h, r = relu_forward(h)
        caches += [c, r]
        h, c = _conv_bn(net, h, f"{p}.conv2", f"{p}.bn2", 1, 1, mode)
        caches.append(c)
    else:
        h, c = _conv_bn(net, x, f"{p}.conv1", f"{p}.bn1", 1, 0, mode)
        h, r = relu_forward(h)
        caches += [c, r]
        h, c = _conv_bn(net, h, f"{p}.conv2", f"{p}.bn2", b.stride, 1, mode)
        h, r = relu_forward(h)
        caches += [c, r]
        h, c = _conv_bn(net, h, f"{p}.conv3", f"{p}.bn3", 1, 0, mode)
        caches.append(c)
    if b.projection:
        sc, pc = _conv_bn(net, x, f"{p}.proj", f"{p}.proj_bn", b.stride, 0, mode)
    else:
        sc, pc = x, None
    out, r_out = relu_forward(h + sc)
    if tape is not None:
        tape.append((_block_back, (caches, pc, r_out)))
    return out


def _block_back(g, cache, grads):
    caches, pc, r_out = cache
    g = relu_backward(g, r_out).grad_input
    g_skip = _conv_bn_back(g, pc, grads) if pc is not None else g
    h = g
    # caches alternate conv_bn, relu, conv_bn, ... ending in conv_bn
    for c in reversed(caches):
        if isinstance(c, tuple):
            h = _conv_bn_back(h, c, grads)
        else:
            h = relu_backward(h, c).grad_input
    return h + g_skip


def _head(net, x, tape):
    f, gc = global_avg_pool_forward(x)
    logits, dc = dense_forward(f, net.params["head.w"], net.params["head.b"])
    if tape is not None:
        tape.append((_head_back, (gc, dc)))
    return logits


def _head_back(g, cache, grads):
    gc, dc = cache
    ld = dense_backward(g, dc)
    grads["head.w"] = ld.grad_params["w"]
    grads["head.b"] = ld.grad_params["b"]
    return global_avg_pool_backward(ld.grad_input, gc).grad_input


def _run(net, x, start, stop, mode, tape=None):
    """Run stages ``start..stop`` inclusive."""
    for s in range(start, stop + 1):
        x = _stem(net, x, mode, tape) if s == 0 else _block(net, s, x, mode, tape)
    return x


def _cut_index(net: Network, cut) -> int:
    k = cut.block_index if isinstance(cut, CutPoint) else int(cut)
    if not 0 <= k <= net.spec.num_blocks:
        raise CutError(f"cut {k} outside 0..{net.spec.num_blocks} for {net.spec.name}")
    return k


def _check_batch(x: np.ndarray, expected: tuple[int, ...], what: str):
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(expected):
        raise DimensionError(
            f"{what}: expected N x {' x '.join(map(str, expected))}, got {' x '.join(map(str, x.shape))}"
        )


# -- public execution API ----------------------------------------------------


def forward(net: Network, batch: np.ndarray, mode: str = "infer") -> np.ndarray:
    """Logits ``N x classes``.  Train mode updates the network's running statistics."""
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "train":
        return forward_train(net, batch)[0]
    return forward_suffix(net, forward_prefix(net, batch, 0), 0)


def forward_prefix(net: Network, batch: np.ndarray, cut) -> np.ndarray:
    """Inference-mode activation at the cut boundary."""
    k = _cut_index(net, cut)
    _check_batch(batch, net.spec.input_shape, "forward_prefix")
    return _run(net, batch, 0, k, "infer")


def forward_suffix(net: Network, fmap: np.ndarray, cut) -> np.ndarray:
    """Resume inference from a feature map taken at ``cut``."""
    k = _cut_index(net, cut)
    _check_batch(fmap, activation_shape(net.spec, k), f"forward_suffix at cut {k}")
    return _head(net, _run(net, fmap, k + 1, net.spec.num_blocks, "infer"), None)


def forward_train(net: Network, x: np.ndarray, start: int = 0):
    """Train-mode pass from stage ``start`` (pixels when 0, else the activation after stage ``start - 1``).

    Returns ``(logits, tape)`` for :func:`backward`.
    """
    if start == 0:
        _check_batch(x, net.spec.input_shape, "forward_train")
    else:
        _check_batch(x, activation_shape(net.spec, start - 1), f"forward_train from stage {start}")
    tape: list = []
    h = _run(net, x, start, net.spec.num_blocks, "train", tape)
    return _head(net, h, tape), tape


def backward(tape, grad_logits: np.ndarray):
    """Replay a tape; returns ``(grads, grad_input)`` with grads keyed like :meth:`Network.trainable`."""
    grads: dict[str, np.ndarray] = {}
    g = grad_logits
    for fn, cache in reversed(tape):
        g = fn(g, cache, grads)
    return grads, g
