import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import splitinfer.model.network as network_mod
from splitinfer.errors import CutError, DimensionError, FingerprintError, FormatError, SpecSemanticError, SpecSyntaxError
from splitinfer.model import (
    activation_shape,
    backward,
    build_network,
    cut_fingerprint,
    decode_weights,
    encode_weights,
    flop_count,
    forward,
    forward_prefix,
    forward_suffix,
    forward_train,
    load_model_spec,
    load_weights,
    make_cut,
    param_layout,
    parse_model_spec,
    prefix_flops,
    save_weights,
    suffix_flops,
    suffix_fraction,
    validate_cut_compatibility,
)
from splitinfer.model.flops import conv_flops
from splitinfer.ops import softmax_cross_entropy
from splitinfer.pipeline import builtin_spec_path

TINY = """\
# one basic block
input 3 8 8
stem conv 8 k=3 s=1 p=1
block basic out=8 s=1
head classes=3
"""

SMALL = """\
input 3 16 16
stem conv 8 k=3 s=1 p=1
maxpool k=2 s=2
block bottleneck out=8 s=1
block bottleneck out=16 s=2
block basic out=16 s=1
head classes=3
"""


@pytest.fixture(scope="module")
def mini_a():
    return load_model_spec(builtin_spec_path("mini-A"))


@pytest.fixture(scope="module")
def mini_b():
    return load_model_spec(builtin_spec_path("mini-B"))


# -- spec parsing ------------------------------------------------------------


def test_parse_minimal_spec():
    spec = parse_model_spec(TINY, "tiny")
    assert spec.num_blocks == 1
    assert spec.blocks[0].kind == "basic"
    assert spec.num_classes == 3
    assert not spec.blocks[0].projection


def test_parse_desk_specs(mini_a, mini_b):
    assert mini_a.num_blocks == 8 and mini_b.num_blocks == 16
    assert all(b.kind == "bottleneck" for b in mini_a.blocks + mini_b.blocks)
    assert mini_a.blocks[:7] == mini_b.blocks[:7]
    assert mini_a.stem == mini_b.stem
    assert mini_a.stem.out_channels == 16 and mini_a.stem.stride == 1


def test_declared_input_channel_mismatch_is_semantic_error():
    bad = TINY.replace("block basic out=8 s=1", "block basic out=8 s=1 in=4")
    with pytest.raises(SpecSemanticError, match="channels"):
        parse_model_spec(bad)


@pytest.mark.parametrize(
    "text,line",
    [
        ("input 3 8\n", 1),
        ("input 3 8 8\nstem conv 8 k=3 s=1\n", 2),
        ("input 3 8 8\nstem conv 8 k=3 s=1 p=1\nblock wide out=8 s=1\n", 3),
        ("input 3 8 8\nstem conv 8 k=3 s=1 p=1\n\n# c\nblock basic out=x s=1\n", 5),
        ("input 3 8 8\nfrobnicate\n", 2),
    ],
)
def test_syntax_errors_carry_line_numbers(text, line):
    with pytest.raises(SpecSyntaxError) as e:
        parse_model_spec(text)
    assert e.value.lineno == line
    assert f"line {line}" in str(e.value)


@pytest.mark.parametrize(
    "edit,match",
    [
        (lambda t: t.replace("classes=3", "classes=1"), "class"),
        (lambda t: t.replace("block basic out=8 s=1\n", ""), "block"),
        (lambda t: t.replace("s=1\nhead", "s=3\nhead"), "stride"),
        (lambda t: t.replace("head classes=3\n", ""), "head"),
    ],
)
def test_semantic_errors(edit, match):
    with pytest.raises(SpecSemanticError, match=match):
        parse_model_spec(edit(TINY))


def test_bottleneck_needs_divisible_channels():
    with pytest.raises(SpecSemanticError):
        parse_model_spec(TINY.replace("block basic out=8", "block bottleneck out=6"))


# -- construction ------------------------------------------------------------


def test_build_is_deterministic_and_seed_sensitive(mini_a):
    a, b, c = build_network(mini_a, 1), build_network(mini_a, 1), build_network(mini_a, 2)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)


def test_stem_weight_std_is_he(mini_a):
    w = build_network(mini_a, 0).params["stem.conv.w"]
    assert w.shape == (16, 3, 3, 3)
    assert abs(w.std() / np.sqrt(2 / 27) - 1) < 0.3
    assert abs(w.mean()) < 0.1


def test_param_layout_matches_network(mini_a):
    net = build_network(mini_a, 0)
    convs, bns = param_layout(mini_a)
    assert set(net.params) == set(convs) | {"head.b"}
    assert all(net.params[k].shape == s for k, s in convs.items())
    assert set(net.bn_states) == set(bns)
    np.testing.assert_array_equal(net.params["head.b"], 0)
    assert all(np.all(s.gamma == 1) and np.all(s.beta == 0) for s in net.bn_states.values())


# -- execution ---------------------------------------------------------------


def _batch(spec, n, seed=0):
    return np.random.default_rng(seed).random((n, *spec.input_shape)).astype(np.float32)


def test_forward_shape_and_determinism(mini_a):
    net = build_network(mini_a, 0)
    x = _batch(mini_a, 3)
    a, b = forward(net, x), forward(net, x)
    assert a.shape == (3, 3)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("text", [TINY, SMALL])
def test_split_equivalence_small_specs(text):
    spec = parse_model_spec(text)
    net = build_network(spec, 5)
    # give batchnorm non-trivial running statistics first
    forward(net, _batch(spec, 8, 1), mode="train")
    x = _batch(spec, 4, 2)
    full = forward(net, x)
    for k in range(spec.num_blocks + 1):
        np.testing.assert_array_equal(forward_suffix(net, forward_prefix(net, x, k), k), full)


def test_prefix_shapes(mini_a):
    net = build_network(mini_a, 0)
    x = _batch(mini_a, 1)
    assert forward_prefix(net, x, 0).shape == (1, 16, 32, 32)
    assert forward_prefix(net, x, 4).shape == (1, 32, 16, 16)
    assert forward_prefix(net, x, 8).shape == (1, 64, 8, 8)
    assert activation_shape(mini_a, 7) == (32, 16, 16)


def test_forward_is_batch_invariant(mini_a):
    net = build_network(mini_a, 0)
    x = _batch(mini_a, 4)
    full = forward(net, x)
    for i in range(4):
        np.testing.assert_array_equal(forward(net, x[i : i + 1])[0], full[i])


def test_suffix_accepts_foreign_feature_maps(mini_a, mini_b):
    a, b = build_network(mini_a, 0), build_network(mini_b, 1)
    logits = forward_suffix(b, forward_prefix(a, _batch(mini_a, 2), 7), 7)
    assert logits.shape == (2, 3) and np.isfinite(logits).all()


def test_suffix_shape_error_names_both_shapes(mini_a):
    net = build_network(mini_a, 0)
    with pytest.raises(DimensionError, match=r"32 x 16 x 16.*2 x 16 x 32 x 32"):
        forward_suffix(net, np.zeros((2, 16, 32, 32), np.float32), 4)


def test_forward_rejects_wrong_input_and_cut(mini_a):
    net = build_network(mini_a, 0)
    with pytest.raises(DimensionError):
        forward(net, np.zeros((1, 3, 16, 16), np.float32))
    with pytest.raises(CutError):
        forward_prefix(net, _batch(mini_a, 1), 9)


def test_train_mode_updates_running_stats_only_in_train(mini_a):
    net = build_network(mini_a, 0)
    before = net.bn_states["block1.bn1"].running_mean.copy()
    forward(net, _batch(mini_a, 2))
    np.testing.assert_array_equal(net.bn_states["block1.bn1"].running_mean, before)
    forward(net, _batch(mini_a, 2), mode="train")
    assert not np.array_equal(net.bn_states["block1.bn1"].running_mean, before)


def _as_float64(net):
    from dataclasses import replace

    m = net.copy()
    m.params = {k: v.astype(np.float64) for k, v in m.params.items()}
    m.bn_states = {
        k: replace(s, **{f: getattr(s, f).astype(np.float64) for f in ("gamma", "beta", "running_mean", "running_var")})
        for k, s in m.bn_states.items()
    }
    return m


def test_network_backward_matches_finite_difference():
    spec = parse_model_spec(SMALL)
    net = _as_float64(build_network(spec, 3))
    x = _batch(spec, 4).astype(np.float64)
    y = np.array([0, 1, 2, 1])

    def loss_of(n):
        logits, _ = forward_train(n.copy(), x)
        return softmax_cross_entropy(logits, y)[0]

    logits, tape = forward_train(net.copy(), x)
    grads, _ = backward(tape, softmax_cross_entropy(logits, y)[2])
    assert set(grads) == set(net.trainable())
    eps = 1e-6
    rng = np.random.default_rng(0)
    for name in ["head.w", "head.b", "block2.conv2.w", "block3.bn2.gamma", "block1.bn3.beta", "stem.conv.w", "block2.proj.w"]:
        flat = net.trainable()[name].reshape(-1)
        for i in rng.choice(flat.size, 3, replace=False):
            vals = {}
            for sign in (+1, -1):
                m = net.copy()
                p = m.trainable()[name].copy()
                p.reshape(-1)[i] += sign * eps
                m.set_trainable({name: p})
                vals[sign] = loss_of(m)
            numeric = (vals[1] - vals[-1]) / (2 * eps)
            analytic = grads[name].reshape(-1)[i]
            assert abs(numeric - analytic) <= 1e-6 + 1e-4 * abs(numeric), (name, i, numeric, analytic)


# -- cut compatibility -------------------------------------------------------


def test_cut_compatibility(mini_a, mini_b):
    assert validate_cut_compatibility(mini_a, mini_b, 7) == cut_fingerprint(mini_a, 7)
    assert validate_cut_compatibility(mini_a, mini_b, 0) == cut_fingerprint(mini_b, 0)
    with pytest.raises(CutError, match="block 8"):
        validate_cut_compatibility(mini_a, mini_b, 8)
    with pytest.raises(CutError):
        validate_cut_compatibility(mini_a, mini_b, 9)


def test_cut_compatibility_reflexive_and_monotone(mini_a, mini_b):
    for k in range(mini_a.num_blocks + 1):
        validate_cut_compatibility(mini_a, mini_a, k)
    for k in range(8):
        validate_cut_compatibility(mini_a, mini_b, k)


def test_stem_difference_is_reported():
    a = parse_model_spec(TINY)
    b = parse_model_spec(TINY.replace("stem conv 8 k=3", "stem conv 8 k=5").replace("p=1", "p=2"))
    with pytest.raises(CutError, match="stem"):
        validate_cut_compatibility(a, b, 0)


def test_cut_id_is_stable_and_structural(mini_a, mini_b):
    assert make_cut(mini_a, 4).cut_id == make_cut(mini_b, 4).cut_id
    assert cut_fingerprint(mini_a, 4) != cut_fingerprint(mini_a, 5)
    assert len(cut_fingerprint(mini_a, 4)) == 16
    # sha256 of the canonical stem plus the first four block lines, truncated to 16 hex digits
    assert cut_fingerprint(mini_a, 4) == "dccbc730fe130173"


# -- FLOPs -------------------------------------------------------------------


def test_single_conv_flops():
    assert conv_flops(1, 1, 1, 1, 4, 4) == 32


def test_tiny_flops_by_hand():
    spec = parse_model_spec(TINY)
    stem = 2 * 8 * 3 * 9 * 64 + 2 * 8 * 64
    block = 2 * (2 * 8 * 8 * 9 * 64) + 2 * 8 * 64 + 8 * 64 + 2 * 8 * 64  # two convs, three bn, relu, add, relu
    head = 8 * 64 + 2 * 3 * 8
    assert flop_count(spec) == stem + block + head == 179248


def _instrumented_flops(net, x, monkeypatch):
    """Count ops by wrapping every kernel the network calls during a real forward."""
    total = [0]

    def wrap(name, count):
        orig = getattr(network_mod, name)

        def f(*args, **kw):
            out = orig(*args, **kw)
            total[0] += count(args, out[0])
            return out

        monkeypatch.setattr(network_mod, name, f)

    wrap("conv2d_forward", lambda a, y: 2 * a[1].size * y.shape[2] * y.shape[3])
    wrap("batchnorm_forward", lambda a, y: y[0].size)
    wrap("relu_forward", lambda a, y: y[0].size)
    wrap("maxpool2d_forward", lambda a, y: y[0].size)
    wrap("global_avg_pool_forward", lambda a, y: a[0][0].size)
    wrap("dense_forward", lambda a, y: 2 * a[1].size)
    forward(net, x)
    adds = sum(int(np.prod(activation_shape(net.spec, i))) for i in range(1, net.spec.num_blocks + 1))
    return total[0] + adds


@pytest.mark.parametrize("name", ["mini-A", "mini-B"])
def test_flops_match_instrumented_forward(name, monkeypatch):
    spec = load_model_spec(builtin_spec_path(name))
    net = build_network(spec, 0)
    assert _instrumented_flops(net, _batch(spec, 1), monkeypatch) == flop_count(spec)


def test_small_spec_flops_match_instrumented_forward(monkeypatch):
    spec = parse_model_spec(SMALL)
    assert _instrumented_flops(build_network(spec, 0), _batch(spec, 1), monkeypatch) == flop_count(spec)


def test_desk_flop_values(mini_a, mini_b):
    # frozen from the instrumented count above
    assert flop_count(mini_b) == 11192704
    assert suffix_flops(mini_b, 7) == 5634432
    assert suffix_fraction(mini_b, 7) == pytest.approx(0.503402, abs=1e-6)
    assert suffix_fraction(mini_b, 4) == pytest.approx(0.661, abs=1e-3)
    assert flop_count(mini_a) == prefix_flops(mini_a, 8) + suffix_flops(mini_a, 8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 18), st.integers(0, 18))
def test_flops_additive_over_any_partition(a, b):
    spec = load_model_spec(builtin_spec_path("mini-B"))
    lo, hi = sorted((a, b))
    assert flop_count(spec, 0, lo) + flop_count(spec, lo, hi) + flop_count(spec, hi) == flop_count(spec)


def test_flop_range_error(mini_a):
    with pytest.raises(CutError):
        flop_count(mini_a, 3, 2)
    with pytest.raises(CutError):
        flop_count(mini_a, 0, 11)


# -- weights -----------------------------------------------------------------


def test_weights_round_trip_bitwise(tmp_path, mini_a):
    net = build_network(mini_a, 4)
    forward(net, _batch(mini_a, 4), mode="train")
    save_weights(net, tmp_path / "a.sinw")
    back = load_weights(mini_a, tmp_path / "a.sinw")
    assert back.params.keys() == net.params.keys()
    for k in net.params:
        np.testing.assert_array_equal(back.params[k], net.params[k])
    for k, s in net.bn_states.items():
        for f in ("gamma", "beta", "running_mean", "running_var"):
            np.testing.assert_array_equal(getattr(back.bn_states[k], f), getattr(s, f))
    assert encode_weights(back) == encode_weights(net)


def test_weights_wrong_spec(tmp_path, mini_a, mini_b):
    save_weights(build_network(mini_a, 0), tmp_path / "a.sinw")
    with pytest.raises(FingerprintError):
        load_weights(mini_b, tmp_path / "a.sinw")


def test_weights_truncated_or_flipped(mini_a):
    data = encode_weights(build_network(mini_a, 0))
    with pytest.raises(FormatError, match="corrupt or truncated"):
        decode_weights(mini_a, data[:-1])
    rng = np.random.default_rng(0)
    for pos in rng.choice(len(data), 25, replace=False):
        bad = bytearray(data)
        bad[pos] ^= 0x01
        with pytest.raises(FormatError):
            decode_weights(mini_a, bytes(bad))
