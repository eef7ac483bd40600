"""Command-line entry point: ``splitinfer <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime error (one-line diagnostic on stderr),
2 usage error.  ``--config FILE`` overlays flat ``key=value`` lines onto the
subcommand's flags; flags given on the command line win.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .errors import SplitInferError

log = logging.getLogger("splitinfer")

THREADS_ENV = "SPLIT_INFER_THREADS"


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _patch_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        h, w = (int(parts[0]), int(parts[-1])) if len(parts) in (1, 2) else (0, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"patch size must be N or HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"patch size must be N or HxW, got {text!r}")
    return h, w


def _decay(text: str) -> tuple[tuple[int, float], ...]:
    """``"40:0.1,50:0.1"`` -> ``((40, 0.1), (50, 0.1))``; empty string means no decay."""
    steps = []
    for part in filter(None, text.split(",")):
        try:
            e, f = part.split(":")
            steps.append((int(e), float(f)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"decay steps look like EPOCH:FACTOR, got {part!r}") from None
    return tuple(steps)


def _reuse(text: str) -> tuple[str, str | None]:
    cache, _, weights = text.partition("=")
    return cache, weights or None


def _default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    try:
        return _positive_int(env) if env else 1
    except (ValueError, argparse.ArgumentTypeError):
        return 1


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive_int, default=_default_threads(),
                        help=f"BLAS thread cap (default: ${THREADS_ENV} or 1)")
    common.add_argument("--config", type=Path, help="flat key=value file overlaid onto these flags")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress (per-epoch lines)")

    split = argparse.ArgumentParser(add_help=False)
    split.add_argument("--test-fraction", type=float, default=0.2, help="stratified test share (default 0.2)")
    split.add_argument("--split-seed", type=int, default=0, help="seed of the train/test split (default 0)")

    optim = argparse.ArgumentParser(add_help=False)
    optim.add_argument("--seed", type=int, default=0, help="init and shuffling seed (default 0)")
    optim.add_argument("--epochs", type=_positive_int, default=60, help="epochs (default 60)")
    optim.add_argument("--batch-size", type=_positive_int, default=32, help="mini-batch size (default 32)")
    optim.add_argument("--lr", type=float, default=0.05, help="initial learning rate (default 0.05)")
    optim.add_argument("--momentum", type=float, default=0.9, help="SGD momentum (default 0.9)")
    optim.add_argument("--decay", type=_decay, default=((40, 0.1),),
                       help="learning-rate steps EPOCH:FACTOR[,...] (default 40:0.1)")

    p = argparse.ArgumentParser(prog="splitinfer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    s = sub.add_parser("synth", parents=[common], help="render a synthetic video with ground truth")
    s.add_argument("--out", type=Path, required=True, help="frame directory to create")
    s.add_argument("--kind", choices=("traffic", "square"), default="traffic", help="scene type (default traffic)")
    s.add_argument("--frames", type=_positive_int, default=760, help="frame count (default 760)")
    s.add_argument("--size", type=_positive_int, default=64, help="frame side in pixels (default 64)")
    s.add_argument("--seed", type=int, default=0, help="scene seed (default 0)")

    s = sub.add_parser("extract", parents=[common], help="background subtraction into a patch directory")
    s.add_argument("--frames", type=Path, required=True, help="directory of frame_%%06d.ppm files")
    s.add_argument("--out", type=Path, required=True, help="patch dataset directory to write")
    s.add_argument("--alpha", type=float, default=0.05, help="background learning rate (default 0.05)")
    s.add_argument("--threshold", type=float, default=0.15, help="foreground deviation (default 0.15)")
    s.add_argument("--min-area", type=int, default=16, help="minimum bbox area in pixels (default 16)")
    s.add_argument("--patch-size", type=_patch_size, default=(32, 32), help="N or HxW (default 32)")
    s.add_argument("--warmup", type=int, default=0, help="frames that only train the background (default 0)")
    s.add_argument("--truth", type=Path, help="truth.csv from synth; labels patches instead of unlabeled/")

    s = sub.add_parser("train", parents=[common, split, optim], help="train a network on a patch directory")
    s.add_argument("--spec", required=True, help="model spec file or built-in name (mini-A, mini-B)")
    s.add_argument("--data", type=Path, required=True, help="patch dataset directory")
    s.add_argument("--out", type=Path, required=True, help="weights file to write")
    s.add_argument("--curve", type=Path, help="learning-curve CSV to write")

    s = sub.add_parser("retrain", parents=[common, split, optim],
                       help="retrain the suffix after a cut on cached feature maps")
    s.add_argument("--spec", required=True, help="expensive model spec")
    s.add_argument("--model", type=Path, required=True, help="expensive model weights")
    s.add_argument("--cache", type=Path, required=True, help="feature-map cache covering the train split")
    s.add_argument("--data", type=Path, required=True, help="patch dataset directory (labels and split)")
    s.add_argument("--fine-tune", action="store_true", help="start from the current suffix weights")
    s.add_argument("--out", type=Path, required=True, help="retrained weights file to write")
    s.add_argument("--curve", type=Path, help="learning-curve CSV to write")

    s = sub.add_parser("ingest", parents=[common, split], help="cheap-model Top-K index and feature-map cache")
    s.add_argument("--spec", required=True, help="cheap model spec")
    s.add_argument("--model", type=Path, required=True, help="cheap model weights")
    s.add_argument("--data", type=Path, required=True, help="patch dataset directory")
    s.add_argument("--subset", choices=("all", "train", "test"), default="all", help="frames to ingest (default all)")
    s.add_argument("--cut", type=int, required=True, help="block index of the cut")
    s.add_argument("--k", type=_positive_int, default=3, help="Top-K size (default 3)")
    s.add_argument("--mse-floor", type=float, help="skip frames this close to the previous one")
    s.add_argument("--batch-size", type=_positive_int, default=64, help="inference batch (default 64)")
    s.add_argument("--out-index", type=Path, required=True, help="index file to write")
    s.add_argument("--out-cache", type=Path, required=True, help="cache file to write")

    s = sub.add_parser("query", parents=[common], help="frames the expensive model labels as a class")
    s.add_argument("--class", dest="class_name", required=True, help="class name to look for")
    s.add_argument("--mode", choices=("baseline", "reuse_raw", "reuse_retrained"), default="baseline",
                   help="classification route (default baseline)")
    s.add_argument("--spec", required=True, help="expensive model spec")
    s.add_argument("--model", type=Path, required=True, help="expensive (or retrained) weights")
    s.add_argument("--index", type=Path, required=True, help="Top-K index from ingest")
    s.add_argument("--cache", type=Path, help="feature-map cache (reuse modes)")
    s.add_argument("--data", type=Path, help="patch dataset directory (baseline mode)")

    s = sub.add_parser("bench", parents=[common, split], help="latency and accuracy of every query mode")
    s.add_argument("--spec", required=True, help="expensive model spec")
    s.add_argument("--model", type=Path, required=True, help="expensive model weights")
    s.add_argument("--data", type=Path, required=True, help="patch dataset directory")
    s.add_argument("--subset", choices=("all", "train", "test"), default="test", help="frames to classify (default test)")
    s.add_argument("--index", type=Path, required=True, help="Top-K index from ingest")
    s.add_argument("--reuse", type=_reuse, action="append", default=[], metavar="CACHE[=WEIGHTS]",
                   help="a cut to benchmark: its cache and optional retrained weights (repeatable)")
    s.add_argument("--modes", default="all", help="all, or a comma list of baseline,reuse_raw,reuse_retrained")
    s.add_argument("--repeats", type=_positive_int, default=5, help="timed repeats (default 5)")
    s.add_argument("--include-io", action="store_true", help="time cache and pixel reads too")
    s.add_argument("--out", type=Path, required=True, help="report CSV to write")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every backward kernel")
    s.add_argument("--seed", type=int, default=0, help="seed for inputs and projections (default 0)")
    s.add_argument("--epsilon", type=float, default=1e-3, help="central-difference step (default 1e-3)")

    s = sub.add_parser("flops", parents=[common], help="prefix/suffix FLOPs of a spec at a cut")
    s.add_argument("--spec", required=True, help="model spec file or built-in name")
    s.add_argument("--cut", type=int, required=True, help="block index of the cut")

    s = sub.add_parser("pipeline", parents=[common], help="synth, extract, train, ingest, retrain, bench")
    s.add_argument("--out", type=Path, required=True, help="run directory")
    s.add_argument("--seed", type=int, default=7, help="master seed (default 7)")
    s.add_argument("--frames", type=_positive_int, default=760, help="synthetic frames (default 760)")
    s.add_argument("--epochs", type=_positive_int, default=8, help="epochs per training run (default 8)")
    s.add_argument("--decay-epoch", type=int, default=6, help="epoch of the 10x lr drop (default 6)")
    s.add_argument("--cuts", default="4,7", help="comma list of cut blocks (default 4,7)")
    s.add_argument("--k", type=_positive_int, default=3, help="Top-K size (default 3)")
    s.add_argument("--repeats", type=_positive_int, default=5, help="timed bench repeats (default 5)")
    return p


def _config_tokens(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Turn ``--config FILE`` lines into flag tokens for settings absent from ``argv``.

    Keys are flag names without dashes (``repeats=5`` or ``split-seed=3``);
    boolean switches take true/false.  Unknown keys are usage errors.
    """
    command = argv[0]
    sub = parser._subparsers._group_actions[0].choices.get(command)
    if sub is None:
        return []
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    path = pre.parse_known_args(argv[1:])[0].config
    if path is None:
        return []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        sub.error(f"--config: {e}")
    flags = {opt: a for a in sub._actions for opt in a.option_strings if opt.startswith("--")}
    given = {tok.split("=")[0] for tok in argv if tok.startswith("--")}
    out = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        opt = "--" + key.strip().lstrip("-").replace("_", "-")
        action = flags.get(opt)
        if not sep or action is None or opt == "--config":
            sub.error(f"{path}:{lineno}: unknown setting {key.strip()!r}")
        if opt in given:
            continue
        value = value.strip()
        if action.nargs == 0:
            if value.lower() in ("1", "true", "yes", "on"):
                out.append(opt)
            elif value.lower() not in ("0", "false", "no", "off"):
                sub.error(f"{path}:{lineno}: {key.strip()} takes true or false, got {value!r}")
        else:
            out.append(f"{opt}={value}")
    return out


def parse_args(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_help(sys.stderr)
        raise SystemExit(2)
    argv = argv + _config_tokens(parser, argv)
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        raise SystemExit(2)
    return args


# -- commands ----------------------------------------------------------------


def _load_net(spec_arg, weights):
    from .model import load_model_spec, load_weights
    from .pipeline import resolve_spec_path

    return load_weights(load_model_spec(resolve_spec_path(spec_arg)), weights)


def _train_config(args):
    from .training import TrainConfig

    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, momentum=args.momentum,
                       lr_decay=args.decay, seed=args.seed)


def cmd_synth(args):
    from .extract import write_frames
    from .synth import moving_square, write_scene

    if args.kind == "traffic":
        write_scene(args.out, args.frames, args.size, args.seed)
    else:
        frames, boxes = moving_square(args.frames, args.size, seed=args.seed)
        write_frames(args.out, frames)
        with open(args.out / "truth.csv", "w") as fh:
            fh.write("frame,label,x,y,w,h\n")
            fh.writelines(f"{i},square,{b.x},{b.y},{b.w},{b.h}\n" for i, b in enumerate(boxes))
    print(f"wrote {args.frames} frames to {args.out}")


def cmd_extract(args):
    from .extract import extract_to_dir
    from .synth import read_truth, truth_labeler

    labeler = truth_labeler(read_truth(args.truth)) if args.truth else None
    rows = extract_to_dir(args.frames, args.out, args.alpha, args.threshold, args.min_area,
                          args.patch_size, args.warmup, labeler)
    print(f"wrote {len(rows)} patches to {args.out}")


def cmd_train(args):
    from .dataset import load_patch_dataset, split_train_test
    from .model import build_network, load_model_spec, save_weights
    from .pipeline import resolve_spec_path
    from .training import train_full

    spec = load_model_spec(resolve_spec_path(args.spec))
    train, test = split_train_test(load_patch_dataset(args.data), args.test_fraction, args.split_seed)
    net, curve = train_full(build_network(spec, args.seed), train, test, _train_config(args))
    save_weights(net, args.out)
    if args.curve:
        curve.write_csv(args.curve)
    print(f"{spec.name}: test accuracy {curve.epochs[-1].test_acc:.4f}; weights in {args.out}")


def cmd_retrain(args):
    from .dataset import load_patch_dataset, split_train_test
    from .ingest import read_cache
    from .model import save_weights
    from .query import resolve_cut
    from .training import retrain_suffix

    net = _load_net(args.spec, args.model)
    cache = read_cache(args.cache)
    k = resolve_cut(net, cache)
    train, test = split_train_test(load_patch_dataset(args.data), args.test_fraction, args.split_seed)
    test_ids = [f for f in test.source_ids if f in cache.entries]
    test_labels = [int(test.labels[i]) for i, f in enumerate(test.source_ids) if f in cache.entries]
    retrained, curve = retrain_suffix(
        net, k, cache.stack(list(train.source_ids)), train.labels, _train_config(args),
        cache.stack(test_ids) if test_ids else None, test_labels, fine_tune=args.fine_tune,
    )
    save_weights(retrained, args.out)
    if args.curve:
        curve.write_csv(args.curve)
    print(f"{net.spec.name}@cut{k}: test accuracy {curve.epochs[-1].test_acc:.4f}; weights in {args.out}")


def cmd_ingest(args):
    from .ingest import ingest_run
    from .pipeline import load_subset

    net = _load_net(args.spec, args.model)
    ds = load_subset(args.data, args.subset, args.test_fraction, args.split_seed)
    _, _, report = ingest_run(net, ds.images, ds.source_ids, args.k, args.cut, args.mse_floor, args.batch_size,
                              args.out_index, args.out_cache, ds.class_names)
    print(f"processed {report.frames_processed}, skipped {report.frames_skipped}, "
          f"cache {report.cache_bytes} bytes, {report.wall_time:.2f} s")


def cmd_query(args):
    from .dataset import load_patch_dataset
    from .ingest import read_cache, read_index
    from .query import PixelStore, class_id_of, run_query

    net = _load_net(args.spec, args.model)
    index = read_index(args.index)
    cache = pixels = None
    if args.mode == "baseline":
        if args.data is None:
            raise SystemExit(_usage("query", "--data is required in baseline mode"))
        ds = load_patch_dataset(args.data)
        pixels = PixelStore(ds.images, ds.source_ids)
    else:
        if args.cache is None:
            raise SystemExit(_usage("query", f"--cache is required in {args.mode} mode"))
        cache = read_cache(args.cache)
    result = run_query(class_id_of(index, args.class_name), args.mode, net, index, cache, pixels)
    for fid in result.matches:
        print(fid)
    log.info("%d candidates, %d matches", len(result.candidates), len(result.matches))


def cmd_bench(args):
    from .ingest import read_cache, read_index
    from .pipeline import load_subset
    from .query import PixelStore, QueryMode, ReuseSetup, bench_modes, write_bench_csv

    modes = list(QueryMode) if args.modes == "all" else [m.strip() for m in args.modes.split(",")]
    try:
        modes = [QueryMode(m) for m in modes]
    except ValueError as e:
        raise SystemExit(_usage("bench", str(e)))
    net = _load_net(args.spec, args.model)
    ds = load_subset(args.data, args.subset, args.test_fraction, args.split_seed)
    index = read_index(args.index)
    reuse, io = [], {}
    for cache_path, weights in args.reuse:
        cache = read_cache(cache_path)
        retrained = _load_net(args.spec, weights) if weights else None
        reuse.append(ReuseSetup(cache, retrained))
    if any(m.reuses_cache for m in modes) and not reuse:
        raise SystemExit(_usage("bench", "reuse modes need at least one --reuse CACHE[=WEIGHTS]"))
    if args.include_io:
        from .query import resolve_cut

        io["baseline"] = lambda: load_subset(args.data, args.subset, args.test_fraction, args.split_seed)
        for (cache_path, _), setup in zip(args.reuse, reuse):
            k = resolve_cut(net, setup.cache)
            io[f"reuse_raw@{k}"] = io[f"reuse_retrained@{k}"] = lambda p=cache_path: read_cache(p)
    reports = bench_modes(net, index, ds.source_ids, ds.labels, PixelStore(ds.images, ds.source_ids),
                          reuse, modes, args.repeats, io=io or None)
    write_bench_csv(reports, args.out)
    for r in reports:
        print(f"{r.mode:20s} acc={r.accuracy:.4f} latency={r.mean_latency:.3e}+-{r.std_latency:.1e} s/image "
              f"predicted_fraction={r.flops_predicted_fraction:.3f}")


def cmd_gradcheck(args):
    from .gradcheck import run_gradcheck

    ok = True
    for name, (err, tol) in run_gradcheck(args.seed, args.epsilon).items():
        passed = err < tol
        ok &= passed
        print(f"{name:24s} max_rel_err={err:.3e} tol={tol:.0e} {'ok' if passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_flops(args):
    from .model import flop_count, load_model_spec, prefix_flops, suffix_flops, suffix_fraction
    from .pipeline import resolve_spec_path

    spec = load_model_spec(resolve_spec_path(args.spec))
    print(f"spec {spec.name} cut {args.cut}")
    print(f"prefix_flops {prefix_flops(spec, args.cut)}")
    print(f"suffix_flops {suffix_flops(spec, args.cut)}")
    print(f"total_flops {flop_count(spec)}")
    print(f"suffix_fraction {suffix_fraction(spec, args.cut):.6f}")


def cmd_pipeline(args):
    from .pipeline import PipelineConfig, run_pipeline

    try:
        cuts = tuple(int(c) for c in args.cuts.split(","))
    except ValueError:
        raise SystemExit(_usage("pipeline", f"--cuts must be a comma list of integers, got {args.cuts!r}"))
    cfg = PipelineConfig(seed=args.seed, n_frames=args.frames, cuts=cuts, k=args.k, repeats=args.repeats,
                         epochs=args.epochs, decay_epoch=args.decay_epoch)
    for r in run_pipeline(args.out, cfg):
        print(f"{r.mode:20s} acc={r.accuracy:.4f} latency={r.mean_latency:.3e}+-{r.std_latency:.1e} s/image")
    print(f"report: {args.out / 'report.csv'}")


def _usage(command: str, message: str) -> int:
    print(f"splitinfer {command}: error: {message}", file=sys.stderr)
    return 2


COMMANDS = {
    "synth": cmd_synth, "extract": cmd_extract, "train": cmd_train, "retrain": cmd_retrain,
    "ingest": cmd_ingest, "query": cmd_query, "bench": cmd_bench, "gradcheck": cmd_gradcheck,
    "flops": cmd_flops, "pipeline": cmd_pipeline,
}


def run_command(args) -> int:
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args) or 0
    except SystemExit as e:  # late usage errors raised by a command
        return e.code if isinstance(e.code, int) else 2
    except (SplitInferError, OSError, KeyError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"splitinfer {args.command}: {msg}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    return run_command(args)


if __name__ == "__main__":
    sys.exit(main())
