"""Mini-batch SGD for whole networks and for suffixes trained on cached feature maps."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset import PatchDataset
from .errors import ConfigurationError, DimensionError, InputError
from .model.network import (
    Network,
    backward,
    forward,
    forward_suffix,
    forward_train,
    initialize_stages,
    stage_of,
)
from .model.spec import CutPoint, activation_shape
from .ops import softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    lr_decay: tuple[tuple[int, float], ...] = ((40, 0.1),)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be at least 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``; a decay step ``(e, f)`` applies from epoch ``e`` on."""
        lr = self.lr
        for e, f in self.lr_decay:
            if epoch >= e:
                lr *= f
        return lr


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float


@dataclass
class LearningCurve:
    epochs: list[EpochStats] = field(default_factory=list)

    def __len__(self):
        return len(self.epochs)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "train_acc", "test_acc"])
            for e in self.epochs:
                w.writerow([e.epoch, f"{e.train_loss:.6f}", f"{e.train_acc:.6f}", f"{e.test_acc:.6f}"])


def sgd_step(params, grads, velocity, lr: float, momentum: float):
    """Heavy-ball update ``v <- momentum * v - lr * g``, ``p <- p + v``; returns new dicts."""
    new_p, new_v = {}, {}
    for name, p in params.items():
        g = grads[name]
        v = velocity[name]
        if g.shape != p.shape or v.shape != p.shape:
            raise DimensionError(f"{name}: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v = np.float32(momentum) * v - np.float32(lr) * g
        new_v[name] = v.astype(p.dtype, copy=False)
        new_p[name] = (p + v).astype(p.dtype, copy=False)
    return new_p, new_v


def predict_classes(net: Network, x: np.ndarray, start_cut: int | None = None, batch_size: int = 64) -> np.ndarray:
    """Inference-mode argmax over batches; ``start_cut`` treats ``x`` as feature maps at that cut."""
    out = []
    for i in range(0, len(x), batch_size):
        xb = x[i : i + batch_size]
        logits = forward(net, xb) if start_cut is None else forward_suffix(net, xb, start_cut)
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def evaluate_accuracy(predict_fn, ds: PatchDataset, batched: bool = False) -> float:
    """Fraction of items whose predicted class equals the label.

    ``predict_fn`` maps one image to a class id, or a whole ``N x C x H x W``
    array to ``N`` ids when ``batched`` is true.
    """
    if len(ds) == 0:
        raise InputError("accuracy of an empty dataset is undefined")
    if batched:
        pred = np.asarray(predict_fn(ds.images))
    else:
        pred = np.array([predict_fn(img) for img in ds.images])
    return float(np.mean(pred == ds.labels))


def _fit(net: Network, x, y, start: int, cfg: TrainConfig, eval_fn, tag: str) -> LearningCurve:
    names = [n for n in net.trainable() if stage_of(net.spec, n) >= start]
    velocity = {n: np.zeros_like(net.trainable()[n]) for n in names}
    rng = np.random.default_rng(cfg.seed)
    curve = LearningCurve()
    n = len(y)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        perm = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for i in range(0, n, cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            logits, tape = forward_train(net, x[idx], start)
            loss, _, g = softmax_cross_entropy(logits, y[idx])
            grads, _ = backward(tape, g)
            cur = net.trainable()
            params = {k: cur[k] for k in names}
            new_p, velocity = sgd_step(params, grads, velocity, lr, cfg.momentum)
            net.set_trainable(new_p)
            loss_sum += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y[idx]).sum())
        stats = EpochStats(epoch + 1, loss_sum / n, correct / n, eval_fn(net))
        curve.epochs.append(stats)
        log.info("%s epoch %d/%d lr=%.4g loss=%.4f train_acc=%.4f test_acc=%.4f",
                 tag, stats.epoch, cfg.epochs, lr, stats.train_loss, stats.train_acc, stats.test_acc)
    return curve


def train_full(net: Network, train: PatchDataset, test: PatchDataset, cfg: TrainConfig = TrainConfig()):
    """Train a copy of ``net`` on pixels; returns ``(trained_net, curve)``."""
    for ds, what in ((train, "train"), (test, "test")):
        if ds.num_classes != net.spec.num_classes:
            raise InputError(
                f"{what} set has {ds.num_classes} classes but {net.spec.name} predicts {net.spec.num_classes}"
            )
    net = net.copy()

    def eval_fn(m):
        return float(np.mean(predict_classes(m, test.images) == test.labels)) if len(test) else float("nan")

    curve = _fit(net, train.images, train.labels, 0, cfg, eval_fn, net.spec.name)
    return net, curve


def retrain_suffix(expensive: Network, cut, fmaps: np.ndarray, labels, cfg: TrainConfig = TrainConfig(),
                   test_fmaps: np.ndarray | None = None, test_labels=None, fine_tune: bool = False):
    """Retrain everything after ``cut`` on feature maps from another network's prefix.

    The suffix is redrawn from ``cfg.seed`` first unless ``fine_tune``.  Stem
    and blocks up to the cut are left bitwise untouched.  Returns
    ``(network, curve)``.
    """
    k = cut.block_index if isinstance(cut, CutPoint) else int(cut)
    expected = activation_shape(expensive.spec, k)
    fmaps = np.asarray(fmaps)
    if fmaps.ndim != 4 or tuple(fmaps.shape[1:]) != expected:
        raise DimensionError(f"feature maps {fmaps.shape} do not match the activation {expected} at cut {k}")
    labels = np.asarray(labels, np.int64)
    net = expensive.copy()
    suffix = range(k + 1, net.spec.num_blocks + 2)
    if not fine_tune:
        initialize_stages(net, suffix, cfg.seed)

    def eval_fn(m):
        if test_fmaps is None or not len(test_fmaps):
            return float("nan")
        return float(np.mean(predict_classes(m, test_fmaps, start_cut=k) == np.asarray(test_labels)))

    curve = _fit(net, fmaps, labels, k + 1, cfg, eval_fn, f"{net.spec.name}@cut{k}")
    return net, curve
