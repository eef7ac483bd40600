import itertools

import numpy as np
import pytest

from splitinfer.errors import CutError, InputError
from splitinfer.ingest import FeatureMapCache, TopKIndex, ingest_run
from splitinfer.model import build_network, forward, load_model_spec, parse_model_spec
from splitinfer.pipeline import builtin_spec_path
from splitinfer.query import (
    BenchReport,
    PixelStore,
    QueryMode,
    ReuseSetup,
    bench_latency,
    bench_modes,
    class_id_of,
    classify,
    read_bench_csv,
    resolve_cut,
    run_query,
    select_candidates,
    write_bench_csv,
)

NAMES = ("background", "car", "pedestrian")


def _index(k, entries):
    idx = TopKIndex(k, NAMES)
    for fid, classes in entries.items():
        idx.add(fid, classes)
    return idx


@pytest.fixture(scope="module")
def desk():
    """mini-B with its stem and first seven blocks copied from mini-A, plus a cut-7 ingest."""
    cheap = build_network(load_model_spec(builtin_spec_path("mini-A")), 0)
    expensive = build_network(load_model_spec(builtin_spec_path("mini-B")), 1)
    for name in expensive.params:
        if name.startswith("stem") or any(name.startswith(f"block{i}.") for i in range(1, 8)):
            expensive.params[name] = cheap.params[name].copy()
    for name in expensive.bn_states:
        if name.startswith("stem") or any(name.startswith(f"block{i}.") for i in range(1, 8)):
            expensive.bn_states[name] = cheap.bn_states[name]
    images = np.random.default_rng(0).random((12, 3, 32, 32)).astype(np.float32)
    ids = [f"f{i:02d}" for i in range(12)]
    index, cache, _ = ingest_run(cheap, images, ids, 2, 7, class_names=NAMES, batch_size=5)
    return cheap, expensive, images, ids, index, cache


def test_select_examples():
    idx = TopKIndex(2, NAMES)
    idx.add("a", [0, 2])
    idx.add("b", [1, 2])
    assert select_candidates(idx, 2) == ["a", "b"]
    assert select_candidates(idx, 0) == ["a"]
    assert select_candidates(_index(1, {"a": [0], "b": [0]}), 2) == []
    full = _index(3, {f: list(p) for f, p in zip("abc", itertools.permutations(range(3)))})
    assert select_candidates(full, 1) == ["a", "b", "c"]
    with pytest.raises(InputError):
        select_candidates(idx, 3)


def test_class_lookup():
    idx = _index(1, {})
    assert class_id_of(idx, "car") == 1
    with pytest.raises(InputError, match="truck"):
        class_id_of(idx, "truck")


def test_mode_prerequisites():
    assert QueryMode("reuse_raw").reuses_cache and not QueryMode.BASELINE.reuses_cache
    net = build_network(parse_model_spec("input 3 4 4\nstem conv 4 k=3 s=1 p=1\nblock basic out=4 s=1\nhead classes=3\n"), 0)
    with pytest.raises(InputError, match="cache"):
        classify("reuse_raw", net, ["a"])
    with pytest.raises(InputError, match="pixel"):
        classify("baseline", net, ["a"])
    with pytest.raises(ValueError):
        QueryMode("fast")


def test_empty_candidate_set_runs_nothing(desk):
    _, expensive, images, ids, _, cache = desk
    pixels = PixelStore(images, ids)
    res = run_query(0, "baseline", expensive, _index(1, {"f00": [1]}), cache, pixels)
    assert res.candidates == [] and res.matches == []
    assert pixels.reads == 0


def test_reuse_modes_never_read_pixels(desk):
    _, expensive, images, ids, index, cache = desk
    pixels = PixelStore(images, ids)
    for c in range(3):
        res = run_query(c, QueryMode.REUSE_RAW, expensive, index, cache, pixels)
        assert set(res.matches) <= set(res.candidates) <= set(index.entries)
    assert pixels.reads == 0
    run_query(0, QueryMode.BASELINE, expensive, index, cache, pixels)
    assert pixels.reads == len(select_candidates(index, 0))


def test_split_equivalence_corollary(desk):
    _, expensive, images, ids, index, cache = desk
    pixels = PixelStore(images, ids)
    base = classify("baseline", expensive, ids, pixels=pixels, batch_size=4)
    reuse = classify("reuse_raw", expensive, ids, cache=cache, batch_size=7)
    np.testing.assert_array_equal(base, reuse)
    np.testing.assert_array_equal(base, forward(expensive, images).argmax(axis=1))
    for c in range(3):
        a = run_query(c, "baseline", expensive, index, cache, pixels)
        b = run_query(c, "reuse_retrained", expensive, index, cache, pixels)
        assert a == b


def test_missing_cache_entry_names_frame(desk):
    _, expensive, _, _, index, cache = desk
    partial = FeatureMapCache(cache.cut_id, {k: v for k, v in cache.entries.items() if k != "f03"})
    with pytest.raises(InputError, match="f03"):
        classify("reuse_raw", expensive, ["f01", "f03"], cache=partial)


def test_cut_mismatch(desk):
    _, expensive, *_ = desk
    with pytest.raises(CutError):
        resolve_cut(expensive, FeatureMapCache("0123456789abcdef"))


def test_resolve_cut_covers_every_block(desk):
    from splitinfer.model import cut_fingerprint

    _, expensive, *_ = desk
    for k in range(expensive.spec.num_blocks + 1):
        assert resolve_cut(expensive, FeatureMapCache(cut_fingerprint(expensive.spec, k))) == k


# -- benchmarking ----------------------------------------------------------------------


def test_bench_constant_stub():
    ticks = itertools.count(step=2.0)
    mean, std = bench_latency(lambda: None, 4, repeats=5, clock=lambda: next(ticks))
    assert mean == pytest.approx(0.5)
    assert std == pytest.approx(0.0, abs=1e-12)


def test_bench_warms_up_once_then_times_repeats():
    calls = []
    bench_latency(lambda: calls.append(1), 1, repeats=5)
    assert len(calls) == 6


def test_bench_errors():
    with pytest.raises(InputError):
        bench_latency(lambda: None, 1, repeats=1)
    with pytest.raises(InputError):
        bench_latency(lambda: None, 0, repeats=5)


def test_bench_modes_rows_and_csv(desk, tmp_path):
    _, expensive, images, ids, index, cache = desk
    labels = np.arange(len(ids)) % 3
    reports = bench_modes(expensive, index, ids, labels, PixelStore(images, ids),
                          [ReuseSetup(cache, expensive, index)], repeats=2)
    assert [r.mode for r in reports] == ["baseline", "reuse_raw@7", "reuse_retrained@7"]
    assert reports[0].flops_predicted_fraction == 1.0
    assert 0 < reports[1].flops_predicted_fraction < 1
    # shared prefix: every mode predicts identically
    assert len({r.accuracy for r in reports}) == 1
    assert all(r.std_latency >= 0 and r.repeats == 2 and r.images == 12 for r in reports)
    write_bench_csv(reports, tmp_path / "r.csv")
    rows = read_bench_csv(tmp_path / "r.csv")
    assert list(rows[0]) == ["mode", "accuracy", "mean_latency_s", "std_latency_s", "predicted_suffix_flop_fraction"]
    assert [r["mode"] for r in rows] == [r.mode for r in reports]


def test_bench_modes_include_io(desk):
    _, expensive, images, ids, index, cache = desk
    hits = []
    bench_modes(expensive, index, ids, np.zeros(12), None, [ReuseSetup(cache)], modes=["reuse_raw"],
                repeats=2, io={"reuse_raw@7": lambda: hits.append(1)})
    assert len(hits) == 3


def test_bench_modes_retrained_requires_weights(desk):
    _, expensive, images, ids, index, cache = desk
    with pytest.raises(InputError, match="retrained"):
        bench_modes(expensive, index, ids, np.zeros(12), None, [ReuseSetup(cache)], modes=["reuse_retrained"])


def test_bench_report_is_plain_data():
    r = BenchReport("baseline", 5, 1e-3, 1e-4, 0.9, 1.0)
    assert r.images == 0
