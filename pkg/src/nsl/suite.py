"""The finite-difference gradient suite behind ``gradcheck``.

Each case builds a small random instance, perturbs every entry of its
parameters and reports the worst relative error per case.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autodiff import Tensor
from .fewshot import head_names, meta_objective, meta_setup, sample_episode, similarity_names
from .data import Dataset
from .functional import batch_norm, conv2d, cross_entropy, global_avg_pool, max_pool2d, sphere_conv
from .gns import self_attention_forward
from .gradcheck import CheckReport, finite_diff_check
from .network import BatchNorm, Conv, Linear, MaxPool, Network, NetworkSpec, PredictorConfig, ReLU

SIZES = {"small": {"c": 2, "hw": 4, "k": 2, "batch": 2}, "medium": {"c": 3, "hw": 6, "k": 3, "batch": 3}}


def _spec(size, kind="none", mode="static", **pred):
    c, hw, k = size["c"], size["hw"], size["k"]
    return NetworkSpec((c, hw, hw), 3, [
        Conv(k, 3, similarity=kind, mode=mode), BatchNorm(), ReLU(), MaxPool(),
        Conv(k, 3, similarity=kind, mode=mode), ReLU(), Linear(None),
    ], PredictorConfig(**pred))


def _perturb(net: Network, rng, scale: float = 0.2) -> None:
    for n, t in net.params.items():
        noise = scale * rng.normal(size=t.shape)
        t.data += np.tril(noise) if n.endswith(".L") else noise


def _net_case(size, names_of, kind="none", mode="static", seed=0, **pred):
    def run() -> CheckReport:
        rng = np.random.default_rng(seed)
        net = Network(_spec(size, kind, mode, **pred), seed)
        _perturb(net, rng)
        x = rng.uniform(-1, 1, size=(size["batch"],) + net.spec.input_shape)
        y = np.arange(size["batch"]) % 3
        f = lambda: cross_entropy(net.forward(x, train=True), y)
        return finite_diff_check(f, {n: net.params[n] for n in names_of(net)})
    return run


def _op_case(build):
    def run() -> CheckReport:
        f, params = build(np.random.default_rng(1))
        return finite_diff_check(f, params)
    return run


def _conv(rng):
    x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    probe = rng.normal(size=(2, 3, 3, 3))
    return lambda: (conv2d(x, w, 2, 1, b) * probe).sum(), {"x": x, "W": w, "bias": b}


def _bn(rng):
    x = Tensor(rng.normal(size=(4, 3, 2, 2)), requires_grad=True)
    g = Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    probe = rng.normal(size=x.shape)
    return lambda: (batch_norm(x, g, b, np.zeros(3), np.ones(3), True) * probe).sum(), {"x": x, "gamma": g, "beta": b}


def _pool(rng):
    x = Tensor(rng.permutation(64).reshape(1, 1, 8, 8) * 0.1, requires_grad=True)
    probe = rng.normal(size=(1, 1, 4, 4))
    return lambda: (max_pool2d(x) * probe).sum() + (global_avg_pool(x) * 2.0).sum(), {"x": x}


def _ce(rng):
    z = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    return lambda: cross_entropy(z, [0, 3, 1, 4]), {"logits": z}


def _sphere(rng):
    w = Tensor(rng.normal(size=9), requires_grad=True)
    x = Tensor(rng.normal(size=9), requires_grad=True)
    return lambda: sphere_conv(w, x, "both"), {"w": w, "x": x}


def _attention(softmax_flag):
    def build(rng):
        W = Tensor(rng.uniform(-1, 1, size=(2, 3, 3, 2)), requires_grad=True)
        G1 = Tensor(rng.uniform(-1, 1, size=(2, 2)), requires_grad=True)
        G2 = Tensor(rng.uniform(-1, 1, size=(2, 2)), requires_grad=True)
        X = rng.uniform(-1, 1, size=(3, 3, 2))
        probe = rng.normal(size=(3, 3, 2))
        return lambda: (self_attention_forward(W, G1, G2, X, softmax_flag) * probe).sum(), {"W": W, "G1": G1, "G2": G2}
    return build


def _meta(size):
    def run() -> CheckReport:
        rng = np.random.default_rng(2)
        spec = _spec(size, "diagonal")
        spec = NetworkSpec(spec.input_shape, 3, spec.layers, spec.predictor)
        net = meta_setup(Network(spec, 2), 3)
        _perturb(net, rng, 0.1)
        imgs = rng.uniform(-1, 1, size=(12,) + spec.input_shape)
        ep = sample_episode(Dataset(imgs, np.arange(12) % 3), 3, 2, 2, rng)
        P = {n: Tensor(net.params[n].data.copy(), requires_grad=True, name=n)
             for n in similarity_names(net) + head_names(net)}
        for t in P.values():
            t.data += 0.1 * rng.normal(size=t.shape)
        return finite_diff_check(lambda: meta_objective(net, P, ep, 0.2, 1, 1), P)
    return run


def cases(size: str = "small") -> dict[str, Callable[[], CheckReport]]:
    if size not in SIZES:
        raise ValueError(f"unknown suite size {size!r}; expected one of {sorted(SIZES)}")
    s = SIZES[size]
    sim = lambda net: net.names("similarity")
    out = {
        "conv2d": _op_case(_conv),
        "batch_norm": _op_case(_bn),
        "pooling": _op_case(_pool),
        "cross_entropy": _op_case(_ce),
        "sphere_conv": _op_case(_sphere),
        "conv_weight": _net_case(s, lambda net: net.names("backbone", "head")),
    }
    for kind in ("diagonal", "unconstrained", "block", "cholesky", "shape"):
        out[f"similarity_{kind}"] = _net_case(s, sim, kind)
    out["predictor_dns"] = _net_case(s, lambda net: net.names("predictor"), "diagonal", "dynamic", hidden=3)
    out["predictor_uns"] = _net_case(s, lambda net: net.names("predictor"), "block", "dynamic", hidden=3)
    out["predictor_per_patch"] = _net_case(s, lambda net: net.names("predictor"), "diagonal", "dynamic",
                                           hidden=3, per_patch=True)
    out["adaptation_nets"] = _net_case(s, lambda net: net.names("adapter", "predictor"), "diagonal", "dynamic",
                                       wiring="shared", hidden=3, adapter_channels=2, adapter_size=2)
    out["gns_attention"] = _op_case(_attention(False))
    out["gns_attention_softmax"] = _op_case(_attention(True))
    out["meta_inner_step"] = _meta(s)
    return out


def run_suite(size: str = "small", tol: float = 1e-5) -> dict[str, float]:
    """Worst relative error per case."""
    results = {}
    for name, case in cases(size).items():
        report = case()
        results[name] = report.worst
    return results
