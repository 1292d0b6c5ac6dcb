"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import Tensor, grad
from .errors import ContractError, EvaluationError


@dataclass
class CheckReport:
    """Worst relative error per parameter and the overall verdict.

    The relative error of a parameter tensor is
    ``max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, 1e-300)``: the
    worst entrywise discrepancy measured against the tensor's gradient
    scale.  Entries that are tiny compared with the rest of the tensor are
    therefore held to an absolute bound instead of an unattainable relative one.
    """

    errors: dict[str, float]
    tol: float
    analytic: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    numeric: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-300)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def _value(out) -> float:
    return float(out.data if isinstance(out, Tensor) else out)


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-5,
) -> CheckReport:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f`` takes no arguments and reads the current values of ``params``;
    each entry is perturbed in place by +/-h and restored afterwards.
    """
    if h <= 0:
        raise ContractError("step h must be positive")
    if not isinstance(params, Mapping):
        params = {p.name or f"p{i}": p for i, p in enumerate(params)}
    names = list(params)
    tensors = [params[n] for n in names]
    out = f()
    if not np.isfinite(_value(out)):
        raise EvaluationError("function is non-finite at the base point")
    analytic = [g.data.copy() for g in grad(out, tensors)]
    report = CheckReport(errors={}, tol=tol)
    for name, p, a in zip(names, tensors, analytic):
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            try:
                flat[i] = orig + h
                fp = _value(f())
                flat[i] = orig - h
                fm = _value(f())
            except FloatingPointError:
                fp = fm = float("nan")
            finally:
                flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError(
                    f"non-finite value perturbing {name}[{i}]", param=name, index=i
                )
            numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
        report.errors[name] = relative_error(a, numeric)
        report.analytic[name] = a
        report.numeric[name] = numeric
    return report
