"""Residual model specs, networks, FLOP accounting and weight files."""

from .flops import conv_flops, flop_count, prefix_flops, stage_flops, suffix_flops, suffix_fraction
from .network import (
    Network,
    backward,
    build_network,
    forward,
    forward_prefix,
    forward_suffix,
    forward_train,
    initialize_stages,
    param_layout,
    stage_of,
)
from .spec import (
    BlockSpec,
    CutPoint,
    ModelSpec,
    StemSpec,
    activation_shape,
    cut_fingerprint,
    load_model_spec,
    make_cut,
    parse_model_spec,
    validate_cut_compatibility,
)
from .weights import decode_weights, encode_weights, load_weights, save_weights

__all__ = [
    "BlockSpec",
    "CutPoint",
    "ModelSpec",
    "Network",
    "StemSpec",
    "activation_shape",
    "backward",
    "build_network",
    "conv_flops",
    "cut_fingerprint",
    "decode_weights",
    "encode_weights",
    "flop_count",
    "forward",
    "forward_prefix",
    "forward_suffix",
    "forward_train",
    "initialize_stages",
    "load_model_spec",
    "load_weights",
    "make_cut",
    "param_layout",
    "parse_model_spec",
    "prefix_flops",
    "save_weights",
    "stage_flops",
    "stage_of",
    "suffix_flops",
    "suffix_fraction",
    "validate_cut_compatibility",
]
