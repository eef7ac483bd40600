"""End-to-end desk run: synthetic video to benchmark report, all from one seed.

Layout under the output directory::

    frames/            frame_%06d.ppm plus truth.csv
    patches/<class>/   extracted, auto-labelled patches plus manifest.csv
    models/            mini-A/mini-B specs, trained weights, retrained suffixes
    curves/            learning curves
    ingest/            index.cut<k>.csv and cut<k>.sinc per cut
    report.csv         one row per benchmark mode
"""

from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .dataset import PatchDataset, load_patch_dataset, split_train_test
from .errors import InputError
from .extract import extract_to_dir
from .ingest import ingest_run, read_cache, read_index
from .model import build_network, load_model_spec, make_cut, save_weights, validate_cut_compatibility
from .query import PixelStore, ReuseSetup, bench_modes, write_bench_csv
from .synth import CLASSES, read_truth, truth_labeler, write_scene
from .training import TrainConfig, retrain_suffix, train_full

log = logging.getLogger(__name__)

BUILTIN_SPECS = ("mini-A", "mini-B")


def builtin_spec_path(name: str) -> Path:
    if name not in BUILTIN_SPECS:
        raise InputError(f"unknown built-in spec {name!r}; choose from {', '.join(BUILTIN_SPECS)}")
    return Path(str(resources.files("splitinfer") / "specs" / f"{name}.spec"))


def resolve_spec_path(spec: str) -> Path:
    """A spec argument is a file path or the name of a bundled spec."""
    p = Path(spec)
    if p.is_file():
        return p
    if spec in BUILTIN_SPECS:
        return builtin_spec_path(spec)
    raise InputError(f"{spec}: no such spec file")


def load_subset(data_dir, subset: str = "all", test_fraction: float = 0.2, split_seed: int = 0) -> PatchDataset:
    """Load a patch directory and return all of it or one side of the stratified split."""
    ds = load_patch_dataset(data_dir)
    if subset == "all":
        return ds
    if subset not in ("train", "test"):
        raise InputError(f"subset must be all, train or test, got {subset!r}")
    train, test = split_train_test(ds, test_fraction, split_seed)
    return train if subset == "train" else test


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 7
    n_frames: int = 760
    frame_size: int = 64
    warmup: int = 40
    test_fraction: float = 0.2
    cuts: tuple[int, ...] = (4, 7)
    k: int = 3
    repeats: int = 5
    epochs: int = 8
    decay_epoch: int = 6
    lr: float = 0.05
    batch_size: int = 32

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           lr_decay=((self.decay_epoch, 0.1),), seed=self.seed)


def run_pipeline(out_dir, cfg: PipelineConfig = PipelineConfig()):
    """Run every phase and write ``report.csv``; returns the bench reports."""
    out = Path(out_dir)
    for sub in ("models", "curves", "ingest"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    log.info("synth: %d frames, seed %d", cfg.n_frames, cfg.seed)
    write_scene(out / "frames", cfg.n_frames, cfg.frame_size, cfg.seed)
    labeler = truth_labeler(read_truth(out / "frames" / "truth.csv"))
    if (out / "patches").exists():
        shutil.rmtree(out / "patches")
    rows = extract_to_dir(out / "frames", out / "patches", warmup=cfg.warmup, labeler=labeler)
    log.info("extract: %d labelled patches", len(rows))

    ds = load_patch_dataset(out / "patches")
    if ds.class_names != CLASSES:
        raise InputError(f"extraction produced classes {ds.class_names}, expected {CLASSES}")
    train, test = split_train_test(ds, cfg.test_fraction, cfg.seed)
    log.info("split: %d train, %d test", len(train), len(test))

    specs = {}
    for name in BUILTIN_SPECS:
        dst = out / "models" / f"{name}.spec"
        shutil.copyfile(builtin_spec_path(name), dst)
        specs[name] = load_model_spec(dst)
    tcfg = cfg.train_config()
    cheap, curve = train_full(build_network(specs["mini-A"], cfg.seed), train, test, tcfg)
    curve.write_csv(out / "curves" / "mini-A.csv")
    save_weights(cheap, out / "models" / "mini-A.sinw")
    expensive, curve = train_full(build_network(specs["mini-B"], cfg.seed + 1), train, test, tcfg)
    curve.write_csv(out / "curves" / "mini-B.csv")
    save_weights(expensive, out / "models" / "mini-B.sinw")

    reuse = []
    train_ids, test_ids = list(train.source_ids), list(test.source_ids)
    for k in cfg.cuts:
        validate_cut_compatibility(cheap.spec, expensive.spec, k)
        index_path, cache_path = out / "ingest" / f"index.cut{k}.csv", out / "ingest" / f"cut{k}.sinc"
        _, _, report = ingest_run(cheap, ds.images, ds.source_ids, cfg.k, k, class_names=ds.class_names,
                                  out_index=index_path, out_cache=cache_path)
        log.info("ingest cut %d: %d frames, %d cache bytes", k, report.frames_processed, report.cache_bytes)
        # later phases read the files back, exercising the same path a separate query process would
        index = read_index(index_path)
        cache = read_cache(cache_path, expected_cut_id=make_cut(expensive.spec, k).cut_id)
        retrained, curve = retrain_suffix(
            expensive, k, cache.stack(train_ids), train.labels, tcfg, cache.stack(test_ids), test.labels
        )
        curve.write_csv(out / "curves" / f"mini-B.cut{k}.csv")
        save_weights(retrained, out / "models" / f"mini-B.cut{k}.sinw")
        reuse.append(ReuseSetup(cache, retrained, index))

    pixels = PixelStore(ds.images, ds.source_ids)
    reports = bench_modes(expensive, reuse[0].index, test_ids, test.labels, pixels, reuse, repeats=cfg.repeats)
    write_bench_csv(reports, out / "report.csv")
    for r in reports:
        log.info("%-20s acc=%.4f latency=%.3e +- %.1e s/image predicted fraction %.3f",
                 r.mode, r.accuracy, r.mean_latency, r.std_latency, r.flops_predicted_fraction)
    return reports
