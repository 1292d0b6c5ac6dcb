"""N-way K-shot episodes and the three few-shot strategies.

``static_fewshot`` finetunes static similarities and a fresh classifier on
the support set.  ``dynamic_fewshot`` retrains only the classifier of a
dynamic network.  ``meta_train``/``meta_test`` learn an initialization of
the static similarities (and of the classifier) across episodes, with inner
gradient steps that the outer loop differentiates through.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy import stats

from .autodiff import Tensor, grad, no_grad
from .data import Dataset
from .errors import ConfigurationError, TrainingError
from .functional import cross_entropy
from .network import Network
from .optim import SGD, Adam
from .training import TrainConfig, train

RESULT_FIELDS = ("episode_id", "strategy", "accuracy")


@dataclass
class Episode:
    """Support and query sets relabeled to ``0..N-1`` in the order of ``classes``."""

    support: Dataset
    query: Dataset
    classes: list
    support_index: np.ndarray
    query_index: np.ndarray

    @property
    def ways(self) -> int:
        return len(self.classes)

    def relabel(self) -> dict:
        return {c: i for i, c in enumerate(self.classes)}


def sample_episode(dataset: Dataset, N: int, K: int, Q: int, rng: np.random.Generator) -> Episode:
    """Draw N classes, then K support and Q query examples per class, all without replacement."""
    if min(N, K, Q) < 1:
        raise ValueError(f"N, K and Q must be positive, got {N}, {K}, {Q}")
    labels = np.asarray(dataset.labels)
    classes, counts = np.unique(labels, return_counts=True)
    eligible = classes[counts >= K + Q]
    if len(eligible) < N:
        raise ValueError(f"need {N} classes with >= {K + Q} examples each, found {len(eligible)}")
    chosen = rng.choice(eligible, size=N, replace=False)
    sup, qry = [], []
    for c in chosen:
        idx = rng.choice(np.flatnonzero(labels == c), size=K + Q, replace=False)
        sup.append(idx[:K])
        qry.append(idx[K:])
    sup, qry = np.concatenate(sup), np.concatenate(qry)
    new = np.repeat(np.arange(N), K), np.repeat(np.arange(N), Q)
    return Episode(
        support=Dataset(dataset.images[sup], new[0]),
        query=Dataset(dataset.images[qry], new[1]),
        classes=[c.item() for c in chosen],
        support_index=sup,
        query_index=qry,
    )


def episode_stream(dataset: Dataset, N: int, K: int, Q: int, seed: int) -> Iterable[Episode]:
    rng = np.random.default_rng(seed)
    while True:
        yield sample_episode(dataset, N, K, Q, rng)


@dataclass
class FewshotConfig:
    """Finetuning on the support set.

    Defaults follow the reference recipe for static finetuning: SGD with lr
    0.01, momentum 0.9, dampening 0.9, weight decay 0.001 for 100 epochs.
    ``bn_stats`` is ``frozen`` (running statistics untouched) or ``update``.
    ``head_init`` is ``zero`` or ``random`` (Gaussian, std ``head_std``).
    """

    epochs: int = 100
    lr: float = 0.01
    momentum: float = 0.9
    dampening: float = 0.9
    weight_decay: float = 0.001
    batch_size: int | None = None
    bn_stats: str = "frozen"
    head_init: str = "zero"
    head_std: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        if self.bn_stats not in ("frozen", "update"):
            raise ConfigurationError(f"bn_stats must be 'frozen' or 'update', got {self.bn_stats!r}")
        if self.head_init not in ("zero", "random"):
            raise ConfigurationError(f"head_init must be 'zero' or 'random', got {self.head_init!r}")

    def train_config(self, n: int, freeze: list) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size or n, lr=self.lr,
                           momentum=self.momentum, dampening=self.dampening,
                           weight_decay=self.weight_decay, freeze=freeze, seed=self.seed,
                           bn_stats=self.bn_stats)


@dataclass
class FewshotResult:
    accuracy: float
    model: Network
    query_loss: float


def _prepare(net: Network, episode: Episode, config: FewshotConfig) -> Network:
    config.validate()
    model = net.copy()
    model.reset_head(episode.ways)
    if config.head_init == "random":
        w = model.params[f"layer{model.head_index}.weight"]
        w.data[...] = np.random.default_rng(config.seed).normal(0.0, config.head_std, w.shape)
    return model


def _score(model: Network, query: Dataset) -> tuple[float, float]:
    with no_grad():
        logits = model.forward(query.images)
        loss = float(cross_entropy(logits, query.labels).data)
    return float(np.mean(logits.data.argmax(axis=1) == query.labels)), loss


def static_fewshot(net: Network, episode: Episode, config: FewshotConfig | None = None) -> FewshotResult:
    """Finetune static similarities and a fresh N-way classifier; score the query set.

    The input network is untouched; the adapted copy is returned with the score.
    """
    config = config or FewshotConfig()
    if not net.static_similarity_layers():
        raise ConfigurationError("static few-shot needs a network with static similarity layers")
    model = _prepare(net, episode, config)
    freeze = ["group:backbone", "group:predictor", "group:adapter"]
    train(model, episode.support, config.train_config(len(episode.support), freeze))
    acc, loss = _score(model, episode.query)
    return FewshotResult(acc, model, loss)


def _train_head_on_features(model: Network, feats: np.ndarray, labels: np.ndarray, config: FewshotConfig) -> int:
    """SGD on the classifier alone over precomputed features; same batch order as ``train``."""
    p = f"layer{model.head_index}"
    params = {n: model.params[n] for n in (f"{p}.weight", f"{p}.bias")}
    opt = SGD(params, config.lr, config.momentum, config.dampening, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    bs = config.batch_size or len(labels)
    for _ in range(config.epochs):
        order = rng.permutation(len(labels))
        for s in range(0, len(order), bs):
            idx = order[s : s + bs]
            loss = cross_entropy(model.head(Tensor(feats[idx])), labels[idx])
            g = grad(loss, list(params.values()))
            opt.step({n: t.data for n, t in zip(params, g)})
    return opt.steps


def dynamic_fewshot(net: Network, episode: Episode, config: FewshotConfig | None = None) -> FewshotResult:
    """Retrain only a fresh classifier of a dynamic network; predictors and convs stay fixed.

    With everything below the head frozen and batch-norm in evaluation mode,
    the head's inputs do not change during retraining, so they are computed
    once.
    """
    config = config or FewshotConfig()
    if not net.dynamic_layers():
        raise ConfigurationError("dynamic few-shot needs a network with dynamic similarity layers")
    return head_only_fewshot(net, episode, config)


def head_only_fewshot(net: Network, episode: Episode, config: FewshotConfig | None = None) -> FewshotResult:
    """Classifier retraining on fixed features (any network)."""
    config = config or FewshotConfig()
    model = _prepare(net, episode, config)
    with no_grad():
        feats = model.forward(episode.support.images, features=True).data
    _train_head_on_features(model, feats, episode.support.labels, config)
    acc, loss = _score(model, episode.query)
    return FewshotResult(acc, model, loss)


# meta-learning -------------------------------------------------------------


def similarity_names(net: Network) -> list[str]:
    return net.names("similarity")


def head_names(net: Network) -> list[str]:
    return net.names("head")


def episode_loss(net: Network, params: Mapping[str, Tensor], data: Dataset) -> Tensor:
    """Cross-entropy of ``net`` with parameter overrides (batch-norm in evaluation mode)."""
    return cross_entropy(net.forward(data.images, params=params), data.labels)


def meta_inner_step(
    params: Mapping[str, Tensor],
    support: Dataset,
    eta: float,
    net: Network,
    loss_fn: Callable | None = None,
    create_graph: bool = True,
) -> dict[str, Tensor]:
    """One gradient step ``P' = P - eta * dL/dP`` on the given parameters only.

    With ``create_graph`` the result stays differentiable with respect to
    ``params`` (second-order path); otherwise the step is treated as a
    constant shift (first-order approximation).
    """
    if eta < 0:
        raise ConfigurationError(f"inner step size must be non-negative, got {eta}")
    loss_fn = loss_fn or episode_loss
    names = list(params)
    loss = loss_fn(net, params, support)
    gs = grad(loss, [params[n] for n in names], create_graph=create_graph)
    if create_graph:
        return {n: params[n] - g * eta for n, g in zip(names, gs)}
    return {n: params[n] - Tensor(g.data * eta) for n, g in zip(names, gs)}


@dataclass
class MetaConfig:
    """Outer loop: Adam on the similarity and classifier initializations."""

    outer_steps: int = 100
    eta: float = 0.2
    inner_steps: int = 5
    head_steps: int = 20
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    first_order: bool = False
    meta_head: bool = True

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetaConfig":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigurationError(f"unknown meta keys {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetaState:
    """Learned initializations plus the adaptation schedule used at test time."""

    net: Network
    init: dict
    kinds: dict
    eta: float = 0.2
    joint_steps: int = 5
    head_steps: int = 20
    trace: list = field(default_factory=list)

    def validate(self) -> None:
        if self.net.similarity_kinds() != self.kinds:
            raise ConfigurationError(f"similarity kinds {self.kinds} do not match the model {self.net.similarity_kinds()}")
        missing = [n for n in self.init if n not in self.net.params]
        if missing:
            raise ConfigurationError(f"initialization names {missing} are not model parameters")

    def params(self) -> dict[str, Tensor]:
        return {n: Tensor(a.copy(), requires_grad=True, name=n) for n, a in self.init.items()}

    def with_init(self, **arrays) -> "MetaState":
        return MetaState(self.net, {**self.init, **arrays}, dict(self.kinds), self.eta, self.joint_steps,
                         self.head_steps, [])


def meta_setup(net: Network, ways: int) -> Network:
    """Copy of a base-trained network with an N-way zero head, ready for meta-learning."""
    if not net.static_similarity_layers():
        raise ConfigurationError("meta-learning needs static similarity layers")
    model = net.copy()
    model.reset_head(ways)
    return model


@dataclass
class Adaptation:
    params: dict
    similarity_updates: int = 0
    head_updates: int = 0


def adapt(net: Network, params: dict, support: Dataset, eta: float, joint_steps: int, head_steps: int,
          create_graph: bool = True, first_order: bool = False) -> Adaptation:
    """Inner-loop adaptation: joint steps on every given parameter, then classifier-only steps.

    Classifier-only steps run on the head's input features, which stay fixed
    once the similarities stop moving.  With ``create_graph`` the adapted
    parameters remain functions of the initial ones (second-order unless
    ``first_order``); otherwise every step restarts from detached values.
    """
    heads = head_names(net)
    params = dict(params)
    for n in heads:
        if n not in params:
            params[n] = Tensor(net.params[n].data.copy(), requires_grad=True, name=n)
    out = Adaptation(params)
    second = create_graph and not first_order
    for _ in range(joint_steps):
        params = meta_inner_step(params, support, eta, net, create_graph=second)
        if not create_graph:
            params = {n: Tensor(t.data, requires_grad=True, name=n) for n, t in params.items()}
        out.similarity_updates += 1
        out.head_updates += 1
    if head_steps:
        if create_graph:
            feats = net.forward(support.images, params=params, features=True)
        else:
            with no_grad():
                feats = Tensor(net.forward(support.images, params=params, features=True).data)
        hp = {n: params[n] for n in heads}
        for _ in range(head_steps):
            loss = cross_entropy(net.head(feats, hp), support.labels)
            gs = grad(loss, [hp[n] for n in heads], create_graph=second)
            if second:
                hp = {n: hp[n] - g * eta for n, g in zip(heads, gs)}
            elif create_graph:
                hp = {n: hp[n] - Tensor(g.data * eta) for n, g in zip(heads, gs)}
            else:
                hp = {n: Tensor(hp[n].data - eta * g.data, requires_grad=True, name=n) for n, g in zip(heads, gs)}
            out.head_updates += 1
        params = {**params, **hp}
    out.params = params
    return out


def meta_objective(net: Network, params: dict, episode: Episode, eta: float, joint_steps: int = 1,
                   head_steps: int = 0, first_order: bool = False) -> Tensor:
    """Query loss after adapting ``params`` on the support set (differentiable in ``params``)."""
    adapted = adapt(net, params, episode.support, eta, joint_steps, head_steps, True, first_order)
    return episode_loss(net, adapted.params, episode.query)


def meta_gradient(net: Network, params: dict, episode: Episode, eta: float, joint_steps: int = 1,
                  head_steps: int = 0, first_order: bool = False) -> tuple[float, dict]:
    loss = meta_objective(net, params, episode, eta, joint_steps, head_steps, first_order)
    names = list(params)
    gs = grad(loss, [params[n] for n in names])
    return float(loss.data), {n: g.data for n, g in zip(names, gs)}


def meta_train(net: Network, episodes: Iterable[Episode], config: MetaConfig | None = None) -> MetaState:
    """Learn similarity (and classifier) initializations across episodes.

    ``net`` must already carry an N-way head (see ``meta_setup``); its
    similarity parameters are the starting point and are not modified.  The
    inner loop follows the test-time schedule and the outer loop applies
    Adam to the gradient of the post-adaptation query loss.
    """
    config = config or MetaConfig()
    if not similarity_names(net):
        raise ConfigurationError("meta-learning needs static similarity layers")
    names = similarity_names(net) + (head_names(net) if config.meta_head else [])
    params = {n: Tensor(net.params[n].data.copy(), requires_grad=True, name=n) for n in names}
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps)
    trace = []
    it = iter(episodes)
    for step in range(config.outer_steps):
        episode = next(it)
        try:
            loss, g = meta_gradient(net, params, episode, config.eta, config.inner_steps, config.head_steps,
                                    config.first_order)
        except FloatingPointError as exc:
            raise TrainingError(f"non-finite meta-loss at episode {step}: {exc}", step) from None
        if not math.isfinite(loss) or not all(np.isfinite(a).all() for a in g.values()):
            raise TrainingError(f"non-finite meta-loss at episode {step}", step)
        opt.step(g)
        trace.append({"episode": step, "meta_loss": loss})
    return MetaState(net, {n: t.data.copy() for n, t in params.items()}, net.similarity_kinds(),
                     config.eta, config.inner_steps, config.head_steps, trace)


@dataclass
class MetaTestResult:
    accuracy: float
    query_loss: float
    similarity_updates: int
    head_updates: int


def meta_test(state: MetaState, episode: Episode) -> MetaTestResult:
    """Adapt from the learned initialization and score the query set.

    ``joint_steps`` steps update similarities and classifier together, then
    ``head_steps`` steps update the classifier alone, all with step size
    ``eta`` on the full support set.
    """
    state.validate()
    net = state.net
    params = state.params()
    for n in similarity_names(net):
        params.setdefault(n, Tensor(net.params[n].data.copy(), requires_grad=True, name=n))
    ad = adapt(net, params, episode.support, state.eta, state.joint_steps, state.head_steps, create_graph=False)
    with no_grad():
        logits = net.forward(episode.query.images, params=ad.params)
        qloss = float(cross_entropy(logits, episode.query.labels).data)
    acc = float(np.mean(logits.data.argmax(axis=1) == episode.query.labels))
    return MetaTestResult(acc, qloss, ad.similarity_updates, ad.head_updates)


# reporting -----------------------------------------------------------------


def mean_ci(values, level: float = 0.95) -> tuple[float, float]:
    """Mean and half-width of the normal-approximation confidence interval."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return float(v.mean()) if v.size else math.nan, math.nan
    z = stats.norm.ppf(0.5 + level / 2)
    return float(v.mean()), float(z * v.std(ddof=1) / math.sqrt(v.size))


def sign_test(a, b) -> tuple[int, int, float]:
    """One-sided paired sign test that ``a < b`` more often than not; ties dropped.

    Returns (wins, trials, p-value).
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    wins, n = int((d < 0).sum()), int((d != 0).sum())
    if n == 0:
        return 0, 0, 1.0
    return wins, n, float(stats.binomtest(wins, n, 0.5, alternative="greater").pvalue)


def write_results(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_FIELDS)
        for r in rows:
            w.writerow([r["episode_id"], r["strategy"], repr(r["accuracy"])])
