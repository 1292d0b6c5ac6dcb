"""Declarative network specs and the neural-similarity network built from them."""

from __future__ import annotations

import copy
import fnmatch
from dataclasses import asdict, dataclass, field, replace
from typing import ClassVar, Mapping

import numpy as np

from .autodiff import Tensor, as_tensor, reshape
from .errors import ConfigurationError, ShapeError, StateError
from .functional import batch_norm, conv2d, conv_output_size, max_pool2d
from .layers import (
    Adapter,
    SpherePredictor,
    adapt_input,
    ns_conv_forward,
    patchwise_similarity_conv,
)
from .similarity import (
    BlockDiagonalSimilarity,
    CholeskySimilarity,
    DiagonalSimilarity,
    IdentitySimilarity,
    ShapeMaskedSimilarity,
    ShapeShadow,
    SimilarityMatrix,
    UnconstrainedSimilarity,
    shape_mask,
)

STATIC_KINDS = ("identity", "diagonal", "block", "unconstrained", "cholesky", "shape")
_ALIASES = {"dns": "diagonal", "uns": "block", "full": "unconstrained", "psd": "cholesky"}
GROUPS = ("backbone", "head", "similarity", "predictor", "adapter")


@dataclass
class Conv:
    """Convolution; ``similarity`` selects a plain (``none``) or neural-similarity layer.

    Static layers store one learnable similarity of the given kind.  Dynamic
    layers predict ``diagonal`` (DNS) or ``block`` (UNS) similarities per sample.
    For ``shape`` layers, ``shape_r="diagonal"`` keeps ``R`` diagonal so that
    kernel position ``j`` only ever reads input position ``j``.
    """

    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int | None = None
    similarity: str = "none"
    mode: str = "static"
    bias: bool = False
    shape_r: str = "full"
    type: ClassVar[str] = "conv"

    def __post_init__(self):
        self.similarity = _ALIASES.get(self.similarity, self.similarity)
        if self.pad is None:
            self.pad = self.kernel // 2

    @property
    def dynamic(self) -> bool:
        return self.mode == "dynamic"


@dataclass
class BatchNorm:
    type: ClassVar[str] = "batchnorm"


@dataclass
class ReLU:
    type: ClassVar[str] = "relu"


@dataclass
class MaxPool:
    size: int = 2
    stride: int = 2
    type: ClassVar[str] = "maxpool"


@dataclass
class Linear:
    """Fully connected layer; the last one is the classifier head (width = classes when None)."""

    out_features: int | None = None
    type: ClassVar[str] = "linear"


LAYER_TYPES = {cls.type: cls for cls in (Conv, BatchNorm, ReLU, MaxPool, Linear)}


@dataclass
class PredictorConfig:
    """Wiring of the similarity predictors of dynamic layers.

    ``disjoint`` gives each dynamic layer its own predictor; ``shared`` uses a
    single predictor fed through adapters, one per distinct input shape.
    """

    wiring: str = "disjoint"
    hidden: int | None = None
    norm_mode: str = "both"
    hidden_norm: str = "x_only"
    identity_residual: bool = True
    per_patch: bool = False
    adapter_channels: int = 8
    adapter_size: int | None = None


@dataclass
class NetworkSpec:
    input_shape: tuple
    num_classes: int
    layers: list
    predictor: PredictorConfig = field(default_factory=PredictorConfig)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [{"type": l.type, **asdict(l)} for l in self.layers],
            "predictor": asdict(self.predictor),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkSpec":
        layers = []
        for i, entry in enumerate(d["layers"]):
            entry = dict(entry)
            kind = entry.pop("type", None)
            if kind not in LAYER_TYPES:
                raise ConfigurationError(f"layer {i}: unknown layer type {kind!r}")
            try:
                layers.append(LAYER_TYPES[kind](**entry))
            except TypeError as exc:
                raise ConfigurationError(f"layer {i}: {exc}") from None
        try:
            pred = PredictorConfig(**d.get("predictor", {}))
        except TypeError as exc:
            raise ConfigurationError(f"predictor: {exc}") from None
        return cls(tuple(d["input_shape"]), int(d["num_classes"]), layers, pred)

    def plain(self) -> "NetworkSpec":
        """The plain-convolution twin: same layers, every conv an inner-product conv."""
        layers = [
            replace(l, similarity="none", mode="static", shape_r="full") if isinstance(l, Conv) else replace(l)
            for l in self.layers
        ]
        return NetworkSpec(self.input_shape, self.num_classes, layers, replace(self.predictor))

    def with_similarity(self, kind: str, mode: str = "static") -> "NetworkSpec":
        """Copy with every conv layer switched to one similarity kind and mode."""
        layers = [
            replace(l, similarity=kind, mode=mode, shape_r=l.shape_r if kind == "shape" else "full") if isinstance(l, Conv) else replace(l)
            for l in self.layers
        ]
        return NetworkSpec(self.input_shape, self.num_classes, layers, replace(self.predictor))


def infer_shapes(spec: NetworkSpec) -> list[tuple]:
    """Output shape (per sample) of every layer; raises ConfigurationError on mismatch."""
    if len(spec.input_shape) != 3:
        raise ConfigurationError(f"input shape must be (C, H, W), got {spec.input_shape}")
    if spec.num_classes < 1:
        raise ConfigurationError("num_classes must be positive")
    if not spec.layers or not isinstance(spec.layers[-1], Linear):
        raise ConfigurationError("the last layer must be the fully connected classifier head")
    head = spec.layers[-1]
    if head.out_features not in (None, spec.num_classes):
        raise ConfigurationError(
            f"layer {len(spec.layers) - 1}: head width {head.out_features} != {spec.num_classes} classes"
        )
    pc = spec.predictor
    if pc.wiring not in ("disjoint", "shared"):
        raise ConfigurationError(f"predictor wiring must be 'disjoint' or 'shared', got {pc.wiring!r}")
    shape = spec.input_shape
    shapes = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            if len(shape) != 3:
                raise ConfigurationError(f"layer {i}: convolution after a fully connected layer")
            if layer.similarity not in STATIC_KINDS + ("none",):
                raise ConfigurationError(f"layer {i}: unknown similarity {layer.similarity!r}")
            if layer.mode not in ("static", "dynamic"):
                raise ConfigurationError(f"layer {i}: mode must be 'static' or 'dynamic'")
            if layer.dynamic and layer.similarity not in ("diagonal", "block"):
                raise ConfigurationError(
                    f"layer {i}: dynamic similarity must be 'diagonal' (DNS) or 'block' (UNS)"
                )
            if layer.shape_r not in ("full", "diagonal"):
                raise ConfigurationError(f"layer {i}: shape_r must be 'full' or 'diagonal'")
            if layer.shape_r != "full" and layer.similarity != "shape":
                raise ConfigurationError(f"layer {i}: shape_r applies only to 'shape' similarity")
            if layer.out_channels < 1 or layer.kernel < 1 or layer.stride < 1 or layer.pad < 0:
                raise ConfigurationError(f"layer {i}: invalid convolution geometry")
            C, H, W = shape
            Ho = conv_output_size(H, layer.kernel, layer.stride, layer.pad)
            Wo = conv_output_size(W, layer.kernel, layer.stride, layer.pad)
            if Ho < 1 or Wo < 1:
                raise ConfigurationError(f"layer {i}: convolution output {Ho}x{Wo} is empty for input {shape}")
            shape = (layer.out_channels, Ho, Wo)
        elif isinstance(layer, MaxPool):
            if len(shape) != 3 or shape[1] < layer.size or shape[2] < layer.size:
                raise ConfigurationError(f"layer {i}: cannot pool input of shape {shape}")
            C, H, W = shape
            shape = (C, (H - layer.size) // layer.stride + 1, (W - layer.size) // layer.stride + 1)
        elif isinstance(layer, Linear):
            if i != len(spec.layers) - 1 and layer.out_features is None:
                raise ConfigurationError(f"layer {i}: hidden fully connected layer needs a width")
            shape = (layer.out_features or spec.num_classes,)
        elif not isinstance(layer, (BatchNorm, ReLU)):
            raise ConfigurationError(f"layer {i}: unsupported layer {layer!r}")
        shapes.append(shape)
    return shapes


def _input_shapes(spec, shapes):
    return [spec.input_shape] + shapes[:-1]


class Network:
    """A backbone whose conv layers may carry static or dynamic neural similarity.

    Parameters live in ``self.params`` under stable names (``layer{i}.weight``,
    ``layer{i}.sim.d``, ``layer{i}.pred.hidden``, ``shared_pred.out``,
    ``adapter.8x16x16.weight``, ...).  ``forward`` accepts overrides for any
    subset of them, which is how the meta-learning inner loop evaluates
    adapted similarities without touching the stored values.
    """

    def __init__(self, spec: NetworkSpec, seed: int | np.random.Generator = 0):
        self.spec = spec
        self.shapes = infer_shapes(spec)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.groups: dict[str, str] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.shadows: dict[int, ShapeShadow] = {}
        self.masks: dict[int, Tensor] = {}
        self.predictors: dict[int, SpherePredictor] = {}
        self.adapters: dict[tuple, Adapter] = {}
        self.shared_predictor: SpherePredictor | None = None
        self.head_index = len(spec.layers) - 1
        self._build(rng)

    # construction -------------------------------------------------------

    def _add(self, name, value, group):
        self.params[name] = value if isinstance(value, Tensor) else Tensor(value, requires_grad=True, name=name)
        self.params[name].name = name
        self.groups[name] = group

    def _build(self, rng):
        spec = self.spec
        inputs = _input_shapes(spec, self.shapes)
        dynamic = [i for i, l in enumerate(spec.layers) if isinstance(l, Conv) and l.dynamic]
        pc = spec.predictor
        for i, layer in enumerate(spec.layers):
            p = f"layer{i}"
            if isinstance(layer, Conv):
                C = inputs[i][0]
                k = layer.kernel
                fan_in = C * k * k
                self._add(f"{p}.weight", rng.normal(0, np.sqrt(2.0 / fan_in), (layer.out_channels, C, k, k)), "backbone")
                if layer.bias:
                    self._add(f"{p}.bias", np.zeros(layer.out_channels), "backbone")
                if not layer.dynamic:
                    self._build_static(i, layer, C)
            elif isinstance(layer, BatchNorm):
                C = inputs[i][0]
                self._add(f"{p}.gamma", np.ones(C), "backbone")
                self._add(f"{p}.beta", np.zeros(C), "backbone")
                self.buffers[f"{p}.running_mean"] = np.zeros(C)
                self.buffers[f"{p}.running_var"] = np.ones(C)
            elif isinstance(layer, Linear):
                fan_in = int(np.prod(inputs[i]))
                out = layer.out_features or spec.num_classes
                group = "head" if i == self.head_index else "backbone"
                self._add(f"{p}.weight", rng.normal(0, np.sqrt(2.0 / fan_in), (out, fan_in)), group)
                self._add(f"{p}.bias", np.zeros(out), group)
        if not dynamic:
            return
        kinds = {spec.layers[i].similarity for i in dynamic}
        patch = {spec.layers[i].kernel ** 2 for i in dynamic}
        pkind = lambda i: "dns" if spec.layers[i].similarity == "diagonal" else "uns"
        common = dict(hidden=pc.hidden, norm_mode=pc.norm_mode, hidden_norm=pc.hidden_norm,
                      identity_residual=pc.identity_residual, per_patch=pc.per_patch)
        if pc.wiring == "disjoint":
            for i in dynamic:
                pred = SpherePredictor(inputs[i][0], spec.layers[i].kernel ** 2, pkind(i),
                                       prefix=f"layer{i}.pred", rng=rng, **common)
                self.predictors[i] = pred
                for name, t in pred.params.items():
                    self._add(name, t, "predictor")
            return
        if len(kinds) > 1 or len(patch) > 1:
            raise ConfigurationError("a shared predictor needs one similarity kind and kernel size across layers")
        if pc.per_patch:
            raise ConfigurationError("per-patch prediction is available with disjoint wiring only")
        size = pc.adapter_size or min(inputs[i][1] for i in dynamic)
        for i in dynamic:
            shape = tuple(inputs[i])
            if shape not in self.adapters:
                tag = "x".join(str(s) for s in shape)
                try:
                    ad = Adapter(shape, pc.adapter_channels, size, prefix=f"adapter.{tag}", rng=rng)
                except ConfigurationError as exc:
                    raise ConfigurationError(f"layer {i}: {exc}") from None
                self.adapters[shape] = ad
                for name, t in ad.params.items():
                    self._add(name, t, "adapter")
        self.shared_predictor = SpherePredictor(pc.adapter_channels, patch.pop(), pkind(dynamic[0]),
                                                prefix="shared_pred", rng=rng, **common)
        for name, t in self.shared_predictor.params.items():
            self._add(name, t, "predictor")

    def _build_static(self, i, layer, C):
        HV = layer.kernel ** 2
        p = f"layer{i}.sim"
        kind = layer.similarity
        if kind == "diagonal":
            self._add(f"{p}.d", np.ones(HV), "similarity")
        elif kind == "block":
            self._add(f"{p}.M", np.eye(HV), "similarity")
        elif kind == "unconstrained":
            self._add(f"{p}.M", np.eye(C * HV), "similarity")
        elif kind == "cholesky":
            self._add(f"{p}.L", np.eye(HV), "similarity")
        elif kind == "shape":
            self._add(f"{p}.R", np.eye(HV), "similarity")
            self.shadows[i] = ShapeShadow.full(HV)
            self.masks[i] = Tensor(shape_mask(self.shadows[i]), requires_grad=True, name=f"{p}.D")

    # introspection ------------------------------------------------------

    def conv_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.spec.layers) if isinstance(l, Conv)]

    def static_similarity_layers(self) -> list[int]:
        return [i for i in self.conv_layers()
                if not self.spec.layers[i].dynamic and self.spec.layers[i].similarity != "none"]

    def dynamic_layers(self) -> list[int]:
        return [i for i in self.conv_layers() if self.spec.layers[i].dynamic]

    def names(self, *groups: str) -> list[str]:
        for g in groups:
            if g not in GROUPS:
                raise ConfigurationError(f"unknown parameter group {g!r}; expected one of {GROUPS}")
        return [n for n in self.params if self.groups[n] in groups]

    def match(self, patterns) -> list[str]:
        """Names matching fnmatch patterns; ``group:<name>`` selects a whole group."""
        out = []
        for n in self.params:
            for pat in patterns:
                if pat.startswith("group:"):
                    hit = self.groups[n] == pat[6:]
                else:
                    hit = fnmatch.fnmatchcase(n, pat)
                if hit:
                    out.append(n)
                    break
        return out

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def similarity_kinds(self) -> dict[int, str]:
        """Per conv layer: ``none``, a static kind, or ``dynamic-<kind>``."""
        out = {}
        for i in self.conv_layers():
            l = self.spec.layers[i]
            out[i] = f"dynamic-{l.similarity}" if l.dynamic else l.similarity
        return out

    def similarity(self, i: int, params: Mapping[str, Tensor] | None = None) -> SimilarityMatrix:
        """The static similarity of conv layer ``i`` built from (possibly overridden) parameters."""
        P = self.params if params is None else {**self.params, **params}
        layer = self.spec.layers[i]
        if not isinstance(layer, Conv) or layer.dynamic:
            raise StateError(f"layer {i} has no static similarity")
        C = self.params[f"layer{i}.weight"].shape[1]
        HV = layer.kernel ** 2
        p = f"layer{i}.sim"
        kind = layer.similarity
        if kind in ("none", "identity"):
            return IdentitySimilarity(C, HV)
        if kind == "diagonal":
            return DiagonalSimilarity(P[f"{p}.d"], C)
        if kind == "block":
            return BlockDiagonalSimilarity(P[f"{p}.M"], C)
        if kind == "unconstrained":
            return UnconstrainedSimilarity(P[f"{p}.M"], C)
        if kind == "cholesky":
            return CholeskySimilarity(P[f"{p}.L"], C, validate=False)
        sim = ShapeMaskedSimilarity(P[f"{p}.R"], C, shadow=self.shadows[i])
        sim.mask = self.masks[i]
        return sim

    # computation --------------------------------------------------------

    def _conv(self, i, layer, h, P):
        w = P[f"layer{i}.weight"]
        b = P.get(f"layer{i}.bias")
        if layer.similarity == "none":
            return conv2d(h, w, layer.stride, layer.pad, b)
        if not layer.dynamic:
            return ns_conv_forward(w, h, self.similarity(i, P), layer.stride, layer.pad, b)
        C = h.shape[1]
        if self.shared_predictor is None:
            pred = self.predictors[i]
            if pred.per_patch:
                return patchwise_similarity_conv(w, h, pred, layer.stride, layer.pad, P, b)
            sim = pred(h, C, P)
        else:
            sim = self.shared_predictor(adapt_input(self.adapters, h, P), C, P)
        return ns_conv_forward(w, h, sim, layer.stride, layer.pad, b)

    def forward(self, x, train: bool = False, params: Mapping[str, Tensor] | None = None,
                features: bool = False, frozen_bn=()) -> Tensor:
        """Logits for a batch (B, C, H, W); a single image (C, H, W) is batched.

        ``train`` selects batch statistics in batch-norm and updates the running
        buffers, except in the layers listed in ``frozen_bn``, which keep their
        running statistics.  ``features=True`` returns the head's input instead
        of logits.
        """
        P = self.params if params is None else {**self.params, **params}
        h = as_tensor(x)
        if h.ndim == 3:
            h = reshape(h, (1,) + h.shape)
        if tuple(h.shape[1:]) != self.spec.input_shape:
            raise ShapeError(f"input of shape {h.shape[1:]} does not match spec {self.spec.input_shape}")
        for i, layer in enumerate(self.spec.layers):
            p = f"layer{i}"
            if isinstance(layer, Conv):
                h = self._conv(i, layer, h, P)
            elif isinstance(layer, BatchNorm):
                h = batch_norm(h, P[f"{p}.gamma"], P[f"{p}.beta"], self.buffers[f"{p}.running_mean"],
                               self.buffers[f"{p}.running_var"], train and i not in frozen_bn)
            elif isinstance(layer, ReLU):
                h = h.relu()
            elif isinstance(layer, MaxPool):
                h = max_pool2d(h, layer.size, layer.stride)
            else:
                if h.ndim > 2:
                    h = reshape(h, (h.shape[0], -1))
                if features and i == self.head_index:
                    return h
                h = h @ P[f"{p}.weight"].T + P[f"{p}.bias"]
        return h

    __call__ = forward

    def head(self, feats, params=None) -> Tensor:
        """Apply only the classifier head to features from ``forward(features=True)``."""
        P = self.params if params is None else {**self.params, **params}
        p = f"layer{self.head_index}"
        return as_tensor(feats) @ P[f"{p}.weight"].T + P[f"{p}.bias"]

    # maintenance --------------------------------------------------------

    def bn_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.spec.layers) if isinstance(l, BatchNorm)]

    def project(self) -> None:
        """Keep Cholesky factors canonical and diagonal shape ``R`` diagonal after a step."""
        for i in self.static_similarity_layers():
            layer = self.spec.layers[i]
            if layer.similarity == "cholesky":
                self.similarity(i).project()
            elif layer.similarity == "shape" and layer.shape_r == "diagonal":
                R = self.params[f"layer{i}.sim.R"].data
                R[...] = np.diag(np.diag(R))

    def step_shapes(self, eta: float) -> None:
        """Move every shape shadow along the gradient stored on its mask, then refresh masks."""
        for i, mask in self.masks.items():
            if mask.grad is None:
                continue
            sim = self.similarity(i)
            sim.step_shadow(mask.grad, eta)
            self.shadows[i] = sim.shadow

    def reset_head(self, num_classes: int | None = None) -> None:
        """Zero classifier weights and bias, optionally with a new class count."""
        n = num_classes or self.spec.num_classes
        p = f"layer{self.head_index}"
        fan_in = self.params[f"{p}.weight"].shape[1]
        if n != self.spec.num_classes:
            layers = list(self.spec.layers)
            layers[-1] = Linear(None)
            self.spec = replace(self.spec, num_classes=n, layers=layers)
            self.shapes = infer_shapes(self.spec)
        self._add(f"{p}.weight", np.zeros((n, fan_in)), "head")
        self._add(f"{p}.bias", np.zeros(n), "head")

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def fold(self) -> "Network":
        """Plain-convolution network whose kernels absorb every static similarity."""
        if self.dynamic_layers():
            raise StateError("dynamic similarities depend on the input and cannot be folded")
        plain = Network.__new__(Network)
        plain.__dict__.update(copy.deepcopy({k: v for k, v in self.__dict__.items()}))
        plain.spec = self.spec.plain()
        for i in self.static_similarity_layers():
            w = self.params[f"layer{i}.weight"]
            K = w.shape[0]
            folded = self.similarity(i).fold(reshape(w, (K, -1))).data.reshape(w.shape)
            plain.params[f"layer{i}.weight"] = Tensor(folded, requires_grad=True, name=f"layer{i}.weight")
            for name in [n for n in plain.params if n.startswith(f"layer{i}.sim.")]:
                del plain.params[name]
                del plain.groups[name]
        plain.shadows, plain.masks = {}, {}
        return plain

    def plain_twin(self) -> "Network":
        """Plain-conv network sharing this network's backbone values (similarities dropped)."""
        twin = Network.__new__(Network)
        twin.__dict__.update(copy.deepcopy(self.__dict__))
        twin.spec = self.spec.plain()
        for name in [n for n in twin.params if twin.groups[n] in ("similarity", "predictor", "adapter")]:
            del twin.params[name]
            del twin.groups[name]
        twin.shadows, twin.masks, twin.predictors, twin.adapters = {}, {}, {}, {}
        twin.shared_predictor = None
        return twin

    # state --------------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        """All persistent arrays: parameters, buffers and shape shadows."""
        out = {n: t.data for n, t in self.params.items()}
        out.update({f"buffer:{n}": b for n, b in self.buffers.items()})
        out.update({f"shadow:layer{i}": s.D_r for i, s in self.shadows.items()})
        return out

    def load_matching(self, state: Mapping[str, np.ndarray], require=("backbone",)) -> list[str]:
        """Load entries whose names exist here (e.g. a plain backbone into an NSN).

        Every parameter of the ``require`` groups must be present with the
        right shape; nothing is modified otherwise.  Returns the loaded names.
        """
        mine = self.state()
        needed = [n for n in self.names(*require)] + [f"buffer:{b}" for b in self.buffers]
        missing = [n for n in needed if n not in state]
        if missing:
            raise ConfigurationError(f"pretrained state lacks {missing[:5]}")
        common = [n for n in state if n in mine]
        for n in common:
            if np.shape(state[n]) != np.shape(mine[n]):
                raise ConfigurationError(f"state entry {n}: shape {np.shape(state[n])} != {np.shape(mine[n])}")
        self.load_state({**mine, **{n: state[n] for n in common}})
        return common

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        """Load arrays produced by ``state``; validates everything before mutating."""
        mine = self.state()
        missing = sorted(set(mine) - set(state))
        extra = sorted(set(state) - set(mine))
        if missing or extra:
            raise ConfigurationError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for n, a in state.items():
            if np.shape(a) != np.shape(mine[n]):
                raise ConfigurationError(f"state entry {n}: shape {np.shape(a)} != {np.shape(mine[n])}")
        for n, a in state.items():
            if n.startswith("buffer:"):
                self.buffers[n[7:]][...] = a
            elif n.startswith("shadow:"):
                i = int(n[len("shadow:layer"):])
                self.shadows[i] = ShapeShadow(np.array(a, dtype=np.float64), self.shadows[i].alpha)
                self.masks[i].data[...] = shape_mask(self.shadows[i])
            else:
                self.params[n].data[...] = a


def backbone_forward(net: Network, x, params=None, train: bool = False) -> Tensor:
    """Logits of ``net`` on a batch, with optional parameter overrides."""
    return net.forward(x, train=train, params=params)
