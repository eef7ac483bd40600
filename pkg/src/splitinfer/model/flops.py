"""Static FLOP accounting per stage.

Convolutions and the dense head count ``2 * multiply-accumulates``.  Batchnorm,
ReLU, pooling and the residual addition count one op per output element.
Stages are numbered as in :mod:`splitinfer.model.network`: 0 is the stem,
``1..n`` the blocks, ``n + 1`` the head.
"""

from __future__ import annotations

from ..errors import CutError
from ..ops import conv_output_size
from .spec import ModelSpec, activation_shape


def conv_flops(out_c: int, in_c: int, kh: int, kw: int, ho: int, wo: int) -> int:
    return 2 * out_c * in_c * kh * kw * ho * wo


def stage_flops(spec: ModelSpec, stage: int) -> int:
    n = spec.num_blocks
    if stage == 0:
        c_in, h, w = spec.input_shape
        s = spec.stem
        ho, wo = conv_output_size(h, s.k, s.stride, s.pad), conv_output_size(w, s.k, s.stride, s.pad)
        elems = s.out_channels * ho * wo
        total = conv_flops(s.out_channels, c_in, s.k, s.k, ho, wo) + 2 * elems  # bn, relu
        if s.pool_k is not None:
            c, ph, pw = activation_shape(spec, 0)
            total += c * ph * pw
        return total
    if stage == n + 1:
        c, h, w = activation_shape(spec, n)
        return c * h * w + 2 * spec.num_classes * c
    if not 1 <= stage <= n:
        raise CutError(f"stage {stage} outside 0..{n + 1}")
    b = spec.blocks[stage - 1]
    _, h, w = activation_shape(spec, stage - 1)
    ho, wo = activation_shape(spec, stage)[1:]
    m = b.mid_channels
    if b.kind == "basic":
        total = conv_flops(m, b.in_channels, 3, 3, ho, wo) + 2 * m * ho * wo
        total += conv_flops(b.out_channels, m, 3, 3, ho, wo) + b.out_channels * ho * wo
    else:
        total = conv_flops(m, b.in_channels, 1, 1, h, w) + 2 * m * h * w
        total += conv_flops(m, m, 3, 3, ho, wo) + 2 * m * ho * wo
        total += conv_flops(b.out_channels, m, 1, 1, ho, wo) + b.out_channels * ho * wo
    if b.projection:
        total += conv_flops(b.out_channels, b.in_channels, 1, 1, ho, wo) + b.out_channels * ho * wo
    return total + 2 * b.out_channels * ho * wo  # residual add, final relu


def flop_count(spec: ModelSpec, from_block: int = 0, to_block: int | None = None) -> int:
    """FLOPs of stages ``from_block <= s < to_block`` (default: the whole network)."""
    last = spec.num_blocks + 2
    if to_block is None:
        to_block = last
    if not 0 <= from_block <= to_block <= last:
        raise CutError(f"stage range [{from_block}, {to_block}) not within [0, {last}]")
    return sum(stage_flops(spec, s) for s in range(from_block, to_block))


def prefix_flops(spec: ModelSpec, block_index: int) -> int:
    return flop_count(spec, 0, block_index + 1)


def suffix_flops(spec: ModelSpec, block_index: int) -> int:
    return flop_count(spec, block_index + 1)


def suffix_fraction(spec: ModelSpec, block_index: int) -> float:
    return suffix_flops(spec, block_index) / flop_count(spec)
