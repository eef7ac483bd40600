"""Declarative model descriptions, cut points and structural fingerprints.

Spec files are plain text, one directive per line, ``#`` starts a comment::

    input 3 32 32
    stem conv 16 k=3 s=1 p=1
    maxpool k=2 s=2                 # optional
    block bottleneck out=32 s=1     # optional in=<C> is checked against the predecessor
    head classes=3
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass
from pathlib import Path

from ..errors import CutError, SpecSemanticError, SpecSyntaxError
from ..ops import _pool_size, conv_output_size

BLOCK_KINDS = ("basic", "bottleneck")
EXPANSION = 4


@dataclass(frozen=True)
class StemSpec:
    out_channels: int
    k: int
    stride: int
    pad: int
    pool_k: int | None = None
    pool_stride: int | None = None


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    in_channels: int
    out_channels: int
    stride: int

    @property
    def projection(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels

    @property
    def mid_channels(self) -> int:
        return self.out_channels // EXPANSION if self.kind == "bottleneck" else self.out_channels

    def canonical(self) -> str:
        return f"block {self.kind} in={self.in_channels} out={self.out_channels} s={self.stride}"


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: tuple[int, int, int]
    stem: StemSpec
    blocks: tuple[BlockSpec, ...]
    num_classes: int

    def __post_init__(self):
        if not self.blocks:
            raise SpecSemanticError("a model needs at least one block")
        if self.num_classes < 2:
            raise SpecSemanticError(f"head needs at least 2 classes, got {self.num_classes}")
        prev = self.stem.out_channels
        for i, b in enumerate(self.blocks, 1):
            if b.kind not in BLOCK_KINDS:
                raise SpecSemanticError(f"block {i}: unknown kind {b.kind!r}")
            if b.in_channels != prev:
                raise SpecSemanticError(
                    f"block {i}: input channels {b.in_channels} != previous stage output channels {prev}"
                )
            if b.stride not in (1, 2):
                raise SpecSemanticError(f"block {i}: stride must be 1 or 2, got {b.stride}")
            if b.kind == "bottleneck" and b.out_channels % EXPANSION:
                raise SpecSemanticError(
                    f"block {i}: bottleneck out={b.out_channels} is not divisible by {EXPANSION}"
                )
            prev = b.out_channels
        # walk the shapes once so impossible geometries fail at parse time
        for k in range(len(self.blocks) + 1):
            activation_shape(self, k)

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def head_features(self) -> int:
        return self.blocks[-1].out_channels

    def stem_canonical(self) -> str:
        c, h, w = self.input_shape
        s = self.stem
        lines = [f"input {c} {h} {w}", f"stem conv {s.out_channels} k={s.k} s={s.stride} p={s.pad}"]
        if s.pool_k is not None:
            lines.append(f"maxpool k={s.pool_k} s={s.pool_stride}")
        return "\n".join(lines)

    def canonical(self) -> str:
        lines = [self.stem_canonical(), *(b.canonical() for b in self.blocks), f"head classes={self.num_classes}"]
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> int:
        """CRC32 of the canonical text; stored in weight files."""
        return zlib.crc32(self.canonical().encode())


@dataclass(frozen=True)
class CutPoint:
    """Boundary after the stem (``block_index == 0``) or after block ``block_index``."""

    block_index: int
    cut_id: str


def _kv(tok: str, key: str, lineno: int) -> int:
    k, sep, v = tok.partition("=")
    if not sep or k != key:
        raise SpecSyntaxError(lineno, f"expected {key}=<int>, got {tok!r}")
    try:
        return int(v)
    except ValueError:
        raise SpecSyntaxError(lineno, f"{key} must be an integer, got {v!r}") from None


def _int(tok: str, what: str, lineno: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise SpecSyntaxError(lineno, f"{what} must be an integer, got {tok!r}") from None


def parse_model_spec(text: str, name: str = "model") -> ModelSpec:
    input_shape = stem = classes = None
    pool = None
    blocks: list[BlockSpec] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        head = tok[0]
        if head == "input":
            if len(tok) != 4:
                raise SpecSyntaxError(lineno, "usage: input <C> <H> <W>")
            input_shape = tuple(_int(t, "input dimension", lineno) for t in tok[1:])
            if min(input_shape) < 1:
                raise SpecSyntaxError(lineno, "input dimensions must be positive")
        elif head == "stem":
            if len(tok) != 6 or tok[1] != "conv":
                raise SpecSyntaxError(lineno, "usage: stem conv <outC> k=<k> s=<s> p=<p>")
            stem = (
                _int(tok[2], "stem channels", lineno),
                _kv(tok[3], "k", lineno),
                _kv(tok[4], "s", lineno),
                _kv(tok[5], "p", lineno),
            )
        elif head == "maxpool":
            if len(tok) != 3:
                raise SpecSyntaxError(lineno, "usage: maxpool k=<k> s=<s>")
            if stem is None or blocks:
                raise SpecSyntaxError(lineno, "maxpool must directly follow the stem")
            pool = (_kv(tok[1], "k", lineno), _kv(tok[2], "s", lineno))
        elif head == "block":
            if len(tok) not in (4, 5):
                raise SpecSyntaxError(lineno, "usage: block <basic|bottleneck> out=<C> s=<1|2> [in=<C>]")
            if stem is None:
                raise SpecSyntaxError(lineno, "block before stem")
            kind = tok[1]
            if kind not in BLOCK_KINDS:
                raise SpecSyntaxError(lineno, f"unknown block kind {kind!r}")
            out = _kv(tok[2], "out", lineno)
            stride = _kv(tok[3], "s", lineno)
            prev = blocks[-1].out_channels if blocks else stem[0]
            declared_in = _kv(tok[4], "in", lineno) if len(tok) == 5 else prev
            if out < 1:
                raise SpecSyntaxError(lineno, "out must be positive")
            blocks.append(BlockSpec(kind, declared_in, out, stride))
        elif head == "head":
            if len(tok) != 2:
                raise SpecSyntaxError(lineno, "usage: head classes=<N>")
            classes = _kv(tok[1], "classes", lineno)
        else:
            raise SpecSyntaxError(lineno, f"unknown directive {head!r}")
    if input_shape is None:
        raise SpecSemanticError("missing 'input' directive")
    if stem is None:
        raise SpecSemanticError("missing 'stem' directive")
    if classes is None:
        raise SpecSemanticError("missing 'head' directive")
    if stem[0] < 1 or stem[1] < 1 or stem[2] < 1 or stem[3] < 0:
        raise SpecSemanticError("stem conv needs positive channels, kernel and stride, and pad >= 0")
    stem_spec = StemSpec(*stem, *(pool or (None, None)))
    return ModelSpec(name, input_shape, stem_spec, tuple(blocks), classes)


def load_model_spec(path) -> ModelSpec:
    path = Path(path)
    return parse_model_spec(path.read_text(encoding="utf-8"), name=path.stem)


def activation_shape(spec: ModelSpec, block_index: int) -> tuple[int, int, int]:
    """C x H x W of the activation after the stem (0) or after block ``block_index``."""
    if not 0 <= block_index <= len(spec.blocks):
        raise CutError(f"cut {block_index} outside 0..{len(spec.blocks)} for {spec.name}")
    _, h, w = spec.input_shape
    s = spec.stem
    h, w = conv_output_size(h, s.k, s.stride, s.pad), conv_output_size(w, s.k, s.stride, s.pad)
    if s.pool_k is not None:
        h, w = _pool_size(h, s.pool_k, s.pool_stride), _pool_size(w, s.pool_k, s.pool_stride)
    c = s.out_channels
    for b in spec.blocks[:block_index]:
        h, w = conv_output_size(h, 3, b.stride, 1), conv_output_size(w, 3, b.stride, 1)
        c = b.out_channels
    return c, h, w


def cut_fingerprint(spec: ModelSpec, block_index: int) -> str:
    if not 0 <= block_index <= len(spec.blocks):
        raise CutError(f"cut {block_index} outside 0..{len(spec.blocks)} for {spec.name}")
    text = "\n".join([spec.stem_canonical(), *(b.canonical() for b in spec.blocks[:block_index])])
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def make_cut(spec: ModelSpec, block_index: int) -> CutPoint:
    return CutPoint(block_index, cut_fingerprint(spec, block_index))


def validate_cut_compatibility(cheap: ModelSpec, expensive: ModelSpec, cut) -> str:
    """Check that both models share stem and the first ``cut`` blocks; return the cut id.

    ``cut`` may be a :class:`CutPoint` or a block index.
    """
    k = cut.block_index if isinstance(cut, CutPoint) else int(cut)
    for spec in (cheap, expensive):
        if not 0 <= k <= len(spec.blocks):
            raise CutError(f"cut {k} outside 0..{len(spec.blocks)} for {spec.name}")
    if cheap.stem_canonical() != expensive.stem_canonical():
        raise CutError(f"{cheap.name} and {expensive.name} differ at the stem")
    for i in range(k):
        a, b = cheap.blocks[i], expensive.blocks[i]
        if a != b:
            raise CutError(
                f"{cheap.name} and {expensive.name} differ at block {i + 1}: "
                f"{a.canonical()!r} vs {b.canonical()!r}"
            )
    cut_id = cut_fingerprint(cheap, k)
    if isinstance(cut, CutPoint) and cut.cut_id != cut_id:
        raise CutError(f"cut id {cut.cut_id} does not match the shared prefix fingerprint {cut_id}")
    return cut_id
