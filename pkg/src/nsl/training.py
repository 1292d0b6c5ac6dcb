"""Training loop, learning-rate schedule, evaluation and metrics traces."""

from __future__ import annotations

import csv
import fnmatch
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping

import numpy as np

from .autodiff import Tensor, grad, no_grad
from .data import Dataset
from .errors import ConfigurationError, TrainingError
from .functional import cross_entropy
from .network import Network
from .optim import Optimizer, make_optimizer
from .similarity import l1_penalty

TRACE_FIELDS = ("iteration", "epoch", "loss", "lr", "train_acc", "test_acc")


@dataclass
class TrainConfig:
    """Mini-batch training settings.

    ``milestones`` are iteration counts at which the learning rate is
    multiplied by ``decay``.  ``freeze`` holds fnmatch patterns over parameter
    names, or ``group:<name>`` for a whole group (backbone, head, similarity,
    predictor, adapter).  With ``bn_stats="auto"`` batch-norm layers whose
    scale and shift are frozen also keep their running statistics;
    ``frozen`` keeps all of them and ``update`` none.
    """

    epochs: int = 1
    batch_size: int = 32
    optimizer: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    dampening: float = 0.0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    milestones: list = field(default_factory=list)
    decay: float = 0.1
    freeze: list = field(default_factory=list)
    seed: int = 0
    clip_norm: float | None = None
    l1: float = 0.0
    shape_lr: float | None = None
    shape_l1: float = 0.0
    bn_stats: str = "auto"

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigurationError(f"milestones must be strictly increasing, got {self.milestones}")
        if not 0 < self.decay <= 1:
            raise ConfigurationError(f"decay factor must lie in (0, 1], got {self.decay}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.bn_stats not in ("auto", "frozen", "update"):
            raise ConfigurationError(f"bn_stats must be auto, frozen or update, got {self.bn_stats!r}")
        if self.lr <= 0 or self.l1 < 0 or self.shape_l1 < 0:
            raise ConfigurationError("lr must be positive and penalty weights non-negative")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown training keys {unknown}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(config: TrainConfig, iteration: int) -> float:
    """Learning rate in effect at a 0-based iteration."""
    passed = sum(1 for m in config.milestones if iteration >= m)
    return config.lr * config.decay**passed


def build_optimizer(net: Network, config: TrainConfig, names) -> Optimizer:
    params = {n: net.params[n] for n in names}
    if config.optimizer == "sgd":
        return make_optimizer("sgd", params, lr=config.lr, momentum=config.momentum,
                              dampening=config.dampening, weight_decay=config.weight_decay)
    return make_optimizer("adam", params, lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                          eps=config.adam_eps)


def _param_stats(net: Network) -> dict:
    out = {}
    for n, t in net.params.items():
        d = t.data
        finite = np.isfinite(d)
        out[n] = {
            "finite": bool(finite.all()),
            "max_abs": float(np.abs(d[finite]).max()) if finite.any() else math.nan,
        }
    return out


def regularizer(net: Network, config: TrainConfig, params=None) -> Tensor | None:
    """l1 on static similarity blocks plus an l1-style pull on shape masks."""
    total = None
    for i in net.static_similarity_layers():
        kind = net.spec.layers[i].similarity
        if config.l1 and kind != "identity":
            term = l1_penalty(net.similarity(i, params), config.l1)
            total = term if total is None else total + term
        if config.shape_l1 and kind == "shape":
            term = net.masks[i].sum() * config.shape_l1
            total = term if total is None else total + term
    return total


def _mask_frozen(i: int, patterns) -> bool:
    """Shape masks are named ``layer<i>.sim.D`` and belong to the similarity group."""
    name = f"layer{i}.sim.D"
    return any(p == "group:similarity" or fnmatch.fnmatchcase(name, p) for p in patterns)


@dataclass
class TrainResult:
    model: Network
    trace: list
    optimizer: Optimizer | None
    iterations: int


def train(
    net: Network,
    data: Dataset,
    config: TrainConfig,
    test: Dataset | None = None,
    optimizer: Optimizer | None = None,
    loss_fn: Callable | None = None,
) -> TrainResult:
    """Mini-batch training of ``net`` in place.

    One seeded permutation per epoch fixes the batch order.  Parameters
    matching ``config.freeze`` are excluded from the optimizer and never
    change.  Shape-mask shadows move by ``shape_lr`` (default ``lr``) along
    the mask gradient; Cholesky factors are projected after each step.
    A non-finite loss aborts with the iteration index and parameter stats.
    """
    config.validate()
    if len(data) == 0:
        raise ConfigurationError("training set is empty")
    loss_fn = loss_fn or cross_entropy
    classify = loss_fn is cross_entropy
    frozen = set(net.match(config.freeze))
    names = [n for n in net.params if n not in frozen]
    if config.bn_stats == "auto":
        frozen_bn = {i for i in net.bn_layers() if f"layer{i}.gamma" in frozen and f"layer{i}.beta" in frozen}
    else:
        frozen_bn = set(net.bn_layers()) if config.bn_stats == "frozen" else set()
    shape_layers = [i for i in net.masks if not _mask_frozen(i, config.freeze)]
    if optimizer is None:
        optimizer = build_optimizer(net, config, names)
    rng = np.random.default_rng(config.seed)
    trace = []
    it = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        correct = seen = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            x, y = data.images[idx], data.labels[idx]
            lr = lr_at(config, it)
            try:
                logits = net.forward(x, train=True, frozen_bn=frozen_bn)
                loss = loss_fn(logits, y)
                reg = regularizer(net, config)
                total = loss if reg is None else loss + reg
                wrt = [net.params[n] for n in names] + [net.masks[i] for i in shape_layers]
                grads = grad(total, wrt) if wrt else []
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite value at iteration {it}: {exc}", it, _param_stats(net)) from None
            if not np.isfinite(total.data):
                raise TrainingError(f"non-finite loss at iteration {it}", it, _param_stats(net))
            g = {n: t.data for n, t in zip(names, grads)}
            if config.clip_norm:
                norm = math.sqrt(sum(float((a * a).sum()) for a in g.values()))
                if norm > config.clip_norm:
                    g = {n: a * (config.clip_norm / norm) for n, a in g.items()}
            if names:
                optimizer.step(g, lr=lr)
                net.project()
            for i, gm in zip(shape_layers, grads[len(names):]):
                net.masks[i].grad = gm.data
            if shape_layers:
                net.step_shapes(config.shape_lr or lr)
            if classify:
                correct += int((logits.data.argmax(axis=1) == y).sum())
                seen += len(y)
            trace.append({"iteration": it, "epoch": epoch, "loss": float(loss.data), "lr": lr,
                          "train_acc": None, "test_acc": None})
            it += 1
        if trace and classify:
            trace[-1]["train_acc"] = correct / max(seen, 1)
            if test is not None:
                trace[-1]["test_acc"] = 1.0 - evaluate(net, test)
    return TrainResult(net, trace, optimizer, it)


def predict(net: Network, data: Dataset, batch_size: int = 256) -> np.ndarray:
    """Logits in evaluation mode (running batch-norm statistics)."""
    out = []
    with no_grad():
        for start in range(0, len(data), batch_size):
            out.append(net.forward(data.images[start : start + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0, net.spec.num_classes))


def evaluate(net: Network, data: Dataset, batch_size: int = 256) -> float:
    """Error rate under argmax of the logits; ties go to the lowest class index."""
    if len(data) == 0:
        raise ConfigurationError("evaluation set is empty")
    pred = predict(net, data, batch_size).argmax(axis=1)
    return float(np.mean(pred != data.labels))


def pretrained_recipe(net: Network, data: Dataset, phase1: TrainConfig, phase2: TrainConfig | None = None,
                      test: Dataset | None = None) -> list:
    """Train similarity modules on a fixed pretrained backbone, then optionally finetune all.

    Phase 1 freezes the backbone and the classifier; only similarities,
    predictors and adapters learn.  Phase 2 (if given) trains everything not
    listed in its own freeze set.
    """
    p1 = TrainConfig(**{**phase1.to_dict(), "freeze": list(phase1.freeze) + ["group:backbone", "group:head"]})
    traces = [train(net, data, p1, test).trace]
    if phase2 is not None:
        traces.append(train(net, data, phase2, test).trace)
    return traces


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        for row in trace:
            w.writerow(["" if row[k] is None else repr(row[k]) for k in TRACE_FIELDS])
