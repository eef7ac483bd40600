"""Cutting one network in two.

Builds the cheap network, runs a batch through it whole and then in two
halves at every block boundary, and shows that the logits agree bit for bit.
Then prints how the expensive network's FLOPs divide at each cut.

    python3 demos/split_walkthrough.py
"""

import numpy as np

from splitinfer.model import (
    activation_shape,
    build_network,
    cut_fingerprint,
    flop_count,
    forward,
    forward_prefix,
    forward_suffix,
    load_model_spec,
    suffix_fraction,
)
from splitinfer.pipeline import builtin_spec_path

cheap = load_model_spec(builtin_spec_path("mini-A"))
expensive = load_model_spec(builtin_spec_path("mini-B"))
net = build_network(cheap, seed=0)
x = np.random.default_rng(0).random((16, 3, 32, 32)).astype(np.float32)
whole = forward(net, x)

print(f"{cheap.name}: {cheap.num_blocks} blocks, {flop_count(cheap):,} FLOPs per image")
print("cut  activation     cut id            bitwise equal")
for k in range(cheap.num_blocks + 1):
    fmap = forward_prefix(net, x, k)
    same = forward_suffix(net, fmap, k).tobytes() == whole.tobytes()
    print(f"{k:>3}  {str(activation_shape(cheap, k)):<13}  {cut_fingerprint(cheap, k)}  {same}")

print()
print(f"{expensive.name}: {expensive.num_blocks} blocks, {flop_count(expensive):,} FLOPs per image")
print("cut  shared prefix  suffix share of FLOPs")
for k in range(expensive.num_blocks + 1):
    shared = k <= cheap.num_blocks and cut_fingerprint(cheap, k) == cut_fingerprint(expensive, k)
    print(f"{k:>3}  {'yes' if shared else 'no':<13}  {suffix_fraction(expensive, k):.3f}")
