"""Preprocessing, optimizers, the training loop, metrics, and replicas."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import MaskedConv2d, Module


class TrainingFailure(RuntimeError):
    """Raised when the loss becomes non-finite; carries the epoch index."""

    def __init__(self, epoch: int, message: str = ""):
        super().__init__(message or f"training diverged at epoch {epoch}")
        self.epoch = epoch


def normalize_channels(image: np.ndarray) -> np.ndarray:
    """Rescale each channel of a (C, H, W) image into [0, 1].

    A constant channel carries no information and maps to all zeros.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ValueError("expected a (C, H, W) image")
    lo = image.min(axis=(1, 2), keepdims=True)
    hi = image.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    out = np.zeros_like(image)
    np.divide(image - lo, span, out=out, where=span > 0)
    return out


def class_weights(counts) -> np.ndarray:
    """Weight for class c is one minus its share of the training samples."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size < 1:
        raise ValueError("counts must be a non-empty vector")
    if (counts < 0).any():
        raise ValueError("counts must be nonnegative")
    total = counts.sum()
    if total <= 0:
        raise ValueError("total sample count must be positive")
    return (1.0 - counts / total).astype(np.float32)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    optimizer: str = "sgd"  # "sgd" (momentum 0.9) | "adam"
    lr: float = 0.001
    lr_steps: tuple[tuple[int, float], ...] = ()
    momentum: float = 0.9
    weight_decay: float = 0.0
    gate_lr: float | None = None
    gate_weight_decay: float = 0.0
    init_scheme: str = "uniform"
    zero_init_residual: bool = False
    seeds: tuple[int, ...] = (42, 43, 44, 45, 46)
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad epoch or batch size")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        epochs = [e for e, _ in self.lr_steps]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("lr schedule epochs must be strictly increasing")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for step_epoch, rate in self.lr_steps:
            if epoch >= step_epoch:
                lr = rate
        return lr


def gate_parameters(network: Module) -> list[Tensor]:
    out = []

    def visit(module):
        if isinstance(module, MaskedConv2d) and module.gates is not None:
            out.append(module.gates)
        for child in module.children():
            visit(child)

    visit(network)
    return out


class _OptimizerBase:
    def __init__(self, params: Sequence[Tensor], config: TrainConfig, gates: Sequence[Tensor] = ()):
        self.params = list(params)
        self.config = config
        gate_ids = {id(g) for g in gates}
        self.is_gate = [id(p) in gate_ids for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def _effective(self, index: int, lr: float) -> tuple[float, float]:
        cfg = self.config
        if self.is_gate[index]:
            gate_lr = cfg.gate_lr if cfg.gate_lr is not None else lr
            return gate_lr, cfg.gate_weight_decay
        return lr, cfg.weight_decay


class SGD(_OptimizerBase):
    """Stochastic gradient descent with momentum."""

    def __init__(self, params, config, gates=()):
        super().__init__(params, config, gates)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float):
        mu = self.config.momentum
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            eff_lr, wd = self._effective(i, lr)
            g = p.grad if wd == 0.0 else p.grad + wd * p.data
            v = self.velocity[i]
            v *= mu
            v += g
            p.data -= (eff_lr * v).astype(p.data.dtype, copy=False)


class Adam(_OptimizerBase):
    """Adam with the cited defaults: beta1 0.9, beta2 0.999, eps 1e-8."""

    BETA1, BETA2, EPS = 0.9, 0.999, 1e-8

    def __init__(self, params, config, gates=()):
        super().__init__(params, config, gates)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.BETA1, self.BETA2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            eff_lr, wd = self._effective(i, lr)
            g = p.grad if wd == 0.0 else p.grad + wd * p.data
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / bias1
            vhat = self.v[i] / bias2
            p.data -= (eff_lr * mhat / (np.sqrt(vhat) + self.EPS)).astype(
                p.data.dtype, copy=False
            )


def make_optimizer(network: Module, config: TrainConfig):
    cls = SGD if config.optimizer == "sgd" else Adam
    return cls(network.parameters(), config, gates=gate_parameters(network))


@dataclass(frozen=True)
class MetricsReport:
    oa: float
    aa: float
    kappa: float
    per_class_f1: tuple[float, ...]
    confusion: np.ndarray


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true).reshape(-1)
    y_pred = np.asarray(y_pred).reshape(-1)
    keep = y_true >= 0
    y_true, y_pred = y_true[keep], y_pred[keep]
    if y_true.size == 0:
        raise ValueError("no labeled samples to evaluate")
    if y_true.max() >= num_classes or y_pred.max() >= num_classes:
        raise ValueError("label outside [0, num_classes)")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise ValueError("empty confusion matrix")
    row = cm.sum(axis=1)
    col = cm.sum(axis=0)
    diag = np.diag(cm)
    oa = diag.sum() / total
    present = row > 0
    recall = np.divide(diag, row, out=np.zeros_like(diag), where=present)
    aa = recall[present].mean() if present.any() else 0.0
    pe = (row * col).sum() / (total * total)
    if pe >= 1.0:
        kappa = 1.0 if oa >= 1.0 else 0.0
    else:
        kappa = (oa - pe) / (1.0 - pe)
    precision = np.divide(diag, col, out=np.zeros_like(diag), where=col > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(denom), where=denom > 0)
    return MetricsReport(
        oa=float(oa),
        aa=float(aa),
        kappa=float(kappa),
        per_class_f1=tuple(float(v) for v in f1),
        confusion=cm.astype(np.int64),
    )


def predict(network: Module, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Class predictions; (N,) for patches, (N, H, W) for tiles."""
    preds = []
    with ad.no_grad():
        for start in range(0, len(inputs), batch_size):
            xb = Tensor(inputs[start : start + batch_size])
            logits = network.forward(xb, training=False)
            preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds, axis=0)


def evaluate(network: Module, inputs: np.ndarray, labels: np.ndarray, num_classes: int,
             batch_size: int = 256) -> MetricsReport:
    """Confusion-matrix metrics on a labeled split; labels below 0 are ignored."""
    if len(inputs) == 0:
        raise ValueError("empty evaluation set")
    y_pred = predict(network, inputs, batch_size)
    return metrics_from_confusion(confusion_matrix(labels, y_pred, num_classes))


@dataclass(frozen=True)
class TrainData:
    """Arrays for one experiment: patches (N,C,h,w)+(N,) or tiles (N,C,t,t)+(N,t,t)."""

    train_inputs: np.ndarray
    train_labels: np.ndarray
    test_inputs: np.ndarray
    test_labels: np.ndarray
    num_classes: int

    def train_class_counts(self) -> np.ndarray:
        labels = self.train_labels.reshape(-1)
        labels = labels[labels >= 0]
        return np.bincount(labels, minlength=self.num_classes)


@dataclass(frozen=True)
class EpochRow:
    epoch: int
    lr: float
    loss: float
    train_oa: float
    test_oa: float


def train(network: Module, data: TrainData, config: TrainConfig, rng) -> list[EpochRow]:
    """Run the configured epochs on the network in place; returns the epoch log.

    The network's parameters are used as passed (initialize beforehand); the
    rng drives minibatch shuffling only, so the whole run is a deterministic
    function of (initial parameters, data, config, rng state).
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    weights = class_weights(np.maximum(data.train_class_counts(), 1))
    optimizer = make_optimizer(network, config)
    n = len(data.train_inputs)
    log: list[EpochRow] = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(n)
        loss_sum = 0.0
        loss_count = 0
        correct = 0
        seen = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = Tensor(data.train_inputs[idx])
            yb = data.train_labels[idx]
            logits = network.forward(xb, training=True)
            loss = ad.weighted_cross_entropy(logits, yb, weights)
            if not np.isfinite(loss.data):
                raise TrainingFailure(epoch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(lr)
            kept = yb.reshape(-1) >= 0
            if kept.any():
                pred = np.argmax(logits.data, axis=1).reshape(-1)
                correct += int((pred[kept] == yb.reshape(-1)[kept]).sum())
                seen += int(kept.sum())
            loss_sum += float(loss.data) * max(int(kept.sum()), 1)
            loss_count += max(int(kept.sum()), 1)
        train_oa = correct / seen if seen else 0.0
        test_report = evaluate(
            network,
            data.test_inputs,
            data.test_labels,
            data.num_classes,
            config.eval_batch_size,
        )
        log.append(
            EpochRow(
                epoch=epoch,
                lr=lr,
                loss=loss_sum / max(loss_count, 1),
                train_oa=train_oa,
                test_oa=test_report.oa,
            )
        )
    return log


@dataclass(frozen=True)
class ReplicaResult:
    seed: int
    report: MetricsReport
    failed: bool = False


@dataclass(frozen=True)
class ReplicaSummary:
    results: tuple[ReplicaResult, ...]

    @property
    def seeds(self) -> tuple[int, ...]:
        return tuple(r.seed for r in self.results)

    def _values(self, metric: str) -> np.ndarray:
        vals = [
            getattr(r.report, metric) if not r.failed else np.nan for r in self.results
        ]
        return np.asarray(vals, dtype=np.float64)

    def mean(self, metric: str = "oa") -> float:
        return float(np.nanmean(self._values(metric)))

    def std(self, metric: str = "oa") -> float:
        vals = self._values(metric)
        vals = vals[np.isfinite(vals)]
        if vals.size <= 1 or (vals == vals[0]).all():
            return 0.0
        return float(np.std(vals, ddof=1))


def replicas(run: Callable[[int], MetricsReport], seeds: Sequence[int]) -> ReplicaSummary:
    """Run one experiment per seed and aggregate; std is the sample estimate."""
    if not seeds:
        raise ValueError("seeds must be non-empty")
    results = []
    for seed in seeds:
        try:
            report = run(int(seed))
            results.append(ReplicaResult(seed=int(seed), report=report))
        except TrainingFailure:
            empty = MetricsReport(np.nan, np.nan, np.nan, (), np.zeros((0, 0)))
            results.append(ReplicaResult(seed=int(seed), report=empty, failed=True))
    return ReplicaSummary(tuple(results))
