"""Momentum SGD and Adam over named parameters."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .autodiff import Tensor


def sgd_momentum_step(params, grads, state, lr, mu=0.9, dampening=0.0, weight_decay=0.0):
    """In-place step on arrays: ``g += wd p; v = mu v + (1 - dampening) g; p -= lr v``.

    ``state`` maps names to velocity buffers and is created lazily (zeros).
    """
    for name, g in grads.items():
        p = params[name]
        g = g + weight_decay * p if weight_decay else g
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(p)
        v *= mu
        v += (1.0 - dampening) * g
        p -= lr * v
    return params, state


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place bias-corrected Adam step; ``state`` holds ``m``, ``v`` and ``t``."""
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    for name, g in grads.items():
        p = params[name]
        m = m_all.setdefault(name, np.zeros_like(p))
        v = v_all.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)
    return params, state


class Optimizer:
    def __init__(self, params: Mapping[str, Tensor]):
        self.params = dict(params)
        self.steps = 0

    def _arrays(self):
        return {n: t.data for n, t in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray], lr: float | None = None) -> None:
        raise NotImplementedError

    def state_arrays(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    kind = "sgd"

    def __init__(self, params, lr=0.1, momentum=0.9, dampening=0.0, weight_decay=0.0):
        super().__init__(params)
        self.lr, self.momentum, self.dampening, self.weight_decay = lr, momentum, dampening, weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, grads, lr=None):
        sgd_momentum_step(self._arrays(), {n: grads[n] for n in self.params if n in grads}, self.buffers,
                          self.lr if lr is None else lr, self.momentum, self.dampening, self.weight_decay)
        self.steps += 1

    def hyper(self) -> dict:
        return {"lr": self.lr, "momentum": self.momentum, "dampening": self.dampening,
                "weight_decay": self.weight_decay}

    def state_arrays(self):
        out = {f"velocity:{n}": v for n, v in self.buffers.items()}
        out["steps"] = np.array([self.steps], dtype=np.float64)
        return out

    def load_state_arrays(self, arrays):
        self.steps = int(arrays["steps"][0])
        self.buffers = {n[9:]: np.array(a) for n, a in arrays.items() if n.startswith("velocity:")}


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict = {"t": 0, "m": {}, "v": {}}

    def step(self, grads, lr=None):
        adam_step(self._arrays(), {n: grads[n] for n in self.params if n in grads}, self.state,
                  self.lr if lr is None else lr, self.beta1, self.beta2, self.eps)
        self.steps += 1

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    def state_arrays(self):
        out = {f"m:{n}": a for n, a in self.state["m"].items()}
        out.update({f"v:{n}": a for n, a in self.state["v"].items()})
        out["steps"] = np.array([self.steps], dtype=np.float64)
        out["t"] = np.array([self.state["t"]], dtype=np.float64)
        return out

    def load_state_arrays(self, arrays):
        self.steps = int(arrays["steps"][0])
        self.state = {
            "t": int(arrays["t"][0]),
            "m": {n[2:]: np.array(a) for n, a in arrays.items() if n.startswith("m:")},
            "v": {n[2:]: np.array(a) for n, a in arrays.items() if n.startswith("v:")},
        }


def make_optimizer(kind: str, params, **hyper) -> Optimizer:
    if kind == "sgd":
        return SGD(params, **hyper)
    if kind == "adam":
        return Adam(params, **hyper)
    raise ValueError(f"unknown optimizer {kind!r}")
