"""Query phase: Top-K candidate selection, classification with the expensive model, latency benchmarks."""

from __future__ import annotations

import csv
import enum
import gc
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import CutError, InputError
from .ingest import FeatureMapCache, TopKIndex
from .model.network import Network, forward, forward_suffix
from .model.flops import suffix_fraction
from .model.spec import cut_fingerprint


class QueryMode(str, enum.Enum):
    BASELINE = "baseline"
    REUSE_RAW = "reuse_raw"
    REUSE_RETRAINED = "reuse_retrained"

    @property
    def reuses_cache(self) -> bool:
        return self is not QueryMode.BASELINE


class PixelStore:
    """Frame pixels by id, counting every read so tests can assert reuse modes never look."""

    def __init__(self, images: np.ndarray, frame_ids):
        self._images = images
        self._pos = {fid: i for i, fid in enumerate(frame_ids)}
        self.reads = 0

    def __contains__(self, frame_id):
        return frame_id in self._pos

    def stack(self, frame_ids) -> np.ndarray:
        missing = [f for f in frame_ids if f not in self._pos]
        if missing:
            raise InputError(f"no pixels for frame {missing[0]!r}")
        self.reads += len(frame_ids)
        return self._images[[self._pos[f] for f in frame_ids]]


@dataclass(frozen=True)
class QueryResult:
    queried_class: int
    candidates: list[str]
    matches: list[str]
    predictions: dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class BenchReport:
    mode: str
    repeats: int
    mean_latency: float
    std_latency: float
    accuracy: float
    flops_predicted_fraction: float
    images: int = 0


def select_candidates(index: TopKIndex, class_id: int) -> list[str]:
    if not 0 <= class_id < len(index.class_names):
        raise InputError(f"unknown class id {class_id}; index has {len(index.class_names)} classes")
    return [fid for fid, classes in index.entries.items() if class_id in classes]


def class_id_of(index: TopKIndex, name: str) -> int:
    try:
        return index.class_names.index(name)
    except ValueError:
        raise InputError(f"unknown class {name!r}; known: {', '.join(index.class_names)}") from None


def resolve_cut(expensive: Network, cache: FeatureMapCache) -> int:
    """Block index in ``expensive`` whose prefix fingerprint equals the cache's cut id."""
    for k in range(expensive.spec.num_blocks + 1):
        if cut_fingerprint(expensive.spec, k) == cache.cut_id:
            return k
    raise CutError(f"cache cut {cache.cut_id} matches no prefix of {expensive.spec.name}")


def _route(mode: QueryMode, expensive: Network, frame_ids, cache, pixels):
    """Gather the inputs for ``frame_ids`` and pick the forward function for ``mode``."""
    if mode.reuses_cache:
        if cache is None:
            raise InputError(f"mode {mode.value} needs a feature-map cache")
        k = resolve_cut(expensive, cache)
        missing = [f for f in frame_ids if f not in cache.entries]
        if missing:
            raise InputError(f"no cached feature map for frame {missing[0]!r}")
        return cache.stack(frame_ids), lambda xb: forward_suffix(expensive, xb, k)
    if pixels is None:
        raise InputError("baseline mode needs pixel access")
    return pixels.stack(frame_ids), lambda xb: forward(expensive, xb)


def classify(mode, expensive: Network, frame_ids, cache: FeatureMapCache | None = None,
             pixels: PixelStore | None = None, batch_size: int = 64) -> np.ndarray:
    """Predicted class per frame id, routed through pixels or cached feature maps."""
    frame_ids = list(frame_ids)
    if not frame_ids:
        return np.zeros(0, np.int64)
    x, run = _route(QueryMode(mode), expensive, frame_ids, cache, pixels)
    return _argmax_batches(run, x, batch_size)


def _argmax_batches(run, x, batch_size):
    return np.concatenate([run(x[i : i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)])


def run_query(class_id: int, mode, expensive: Network, index: TopKIndex, cache: FeatureMapCache | None = None,
              pixels: PixelStore | None = None, batch_size: int = 64) -> QueryResult:
    candidates = select_candidates(index, class_id)
    pred = classify(mode, expensive, candidates, cache, pixels, batch_size)
    predictions = dict(zip(candidates, pred.tolist()))
    matches = [f for f in candidates if predictions[f] == class_id]
    return QueryResult(class_id, candidates, matches, predictions)


# -- benchmarking ------------------------------------------------------------


def bench_latency(work, images: int, repeats: int = 5, clock=time.perf_counter) -> tuple[float, float]:
    """Per-image ``(mean, sample std)`` seconds of ``work()`` over ``repeats`` timed runs after one warm-up."""
    if repeats < 2:
        raise InputError(f"repeats must be at least 2 for a standard deviation, got {repeats}")
    if images < 1:
        raise InputError("nothing to classify: zero images")
    work()
    per_image = []
    gc.collect()
    was_enabled = gc.isenabled()
    gc.disable()  # a collection landing in one repeat would dominate its time
    try:
        for _ in range(repeats):
            t0 = clock()
            work()
            per_image.append((clock() - t0) / images)
    finally:
        if was_enabled:
            gc.enable()
    return statistics.fmean(per_image), statistics.stdev(per_image)


def query_work(mode, expensive: Network, index: TopKIndex, frame_ids, labels, cache=None, pixels=None,
               batch_size: int = 64):
    """Build the timed workload for one mode plus its accuracy.

    All reads (cache stacking, pixel gathering) happen here, before timing.
    The workload runs candidate selection for every class and classifies
    every frame in ``frame_ids``.
    """
    frame_ids = list(frame_ids)
    if not frame_ids:
        raise InputError("nothing to classify: zero images")
    x, run = _route(QueryMode(mode), expensive, frame_ids, cache, pixels)
    n_classes = len(index.class_names)

    def work():
        for c in range(n_classes):
            select_candidates(index, c)
        return _argmax_batches(run, x, batch_size)

    accuracy = float(np.mean(work() == np.asarray(labels)))
    return work, accuracy


@dataclass(frozen=True)
class ReuseSetup:
    """One cut to benchmark: its feature-map cache and, optionally, the retrained network."""

    cache: FeatureMapCache
    retrained: Network | None = None
    index: TopKIndex | None = None


def bench_modes(expensive: Network, index: TopKIndex, frame_ids, labels, pixels: PixelStore | None,
                reuse=(), modes=tuple(QueryMode), repeats: int = 5, batch_size: int = 64, io=None) -> list[BenchReport]:
    """Benchmark baseline plus every reuse mode at every cut in ``reuse``.

    Rows are named ``baseline``, ``reuse_raw@<cut>`` and ``reuse_retrained@<cut>``.
    ``io`` optionally maps a row name to a callable run inside the timed
    region, for end-to-end numbers that include storage reads.
    """
    modes = [QueryMode(m) for m in modes]
    frame_ids = list(frame_ids)
    jobs = []
    if QueryMode.BASELINE in modes:
        jobs.append(("baseline", QueryMode.BASELINE, expensive, index, None, 1.0))
    for setup in reuse:
        k = resolve_cut(expensive, setup.cache)
        frac = suffix_fraction(expensive.spec, k)
        idx = setup.index or index
        if QueryMode.REUSE_RAW in modes:
            jobs.append((f"reuse_raw@{k}", QueryMode.REUSE_RAW, expensive, idx, setup.cache, frac))
        if QueryMode.REUSE_RETRAINED in modes:
            if setup.retrained is None:
                raise InputError(f"reuse_retrained@{k} needs retrained weights")
            jobs.append((f"reuse_retrained@{k}", QueryMode.REUSE_RETRAINED, setup.retrained, idx, setup.cache, frac))
    reports = []
    for name, mode, net, idx, cache, frac in jobs:
        work, acc = query_work(mode, net, idx, frame_ids, labels, cache, pixels, batch_size)
        if io is not None and name in io:
            inner, extra = work, io[name]
            work = lambda inner=inner, extra=extra: (extra(), inner())  # noqa: E731
        mean, std = bench_latency(work, len(frame_ids), repeats)
        reports.append(BenchReport(name, repeats, mean, std, acc, frac, len(frame_ids)))
    return reports


REPORT_COLUMNS = ["mode", "accuracy", "mean_latency_s", "std_latency_s", "predicted_suffix_flop_fraction"]


def write_bench_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow([r.mode, f"{r.accuracy:.6f}", f"{r.mean_latency:.6e}", f"{r.std_latency:.6e}",
                        f"{r.flops_predicted_fraction:.6f}"])


def read_bench_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
