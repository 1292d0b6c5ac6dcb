"""Gradient flow of linear least squares under the plain and the factorized parameterization.

The loss is ``L(W) = 1/2 sum_i |y_i - W^T x_i|^2`` with ``W`` of shape (n, m).
Samples are stored as rows: ``X`` is (s, n) and ``Y`` is (s, m), so the
residual matrix is ``R = Y - X W``.  The factorized model writes the
composite weight as ``W = M^T W'`` with a square ``M`` (n, n) and runs the
flow on ``W'`` and ``M``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError, ShapeError, TrainingError

TRAJECTORY_FIELDS = ("t", "loss", "frob_norm", "nuclear_norm", "rank", "distance_to_min_norm")
DIVERGENCE = 1e12


@dataclass
class FlowProblem:
    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.Y.ndim == 1:
            self.Y = self.Y.reshape(-1, 1)
        if self.X.shape[0] != self.Y.shape[0]:
            raise ShapeError(f"{self.X.shape[0]} samples in X but {self.Y.shape[0]} targets in Y")
        if not (np.isfinite(self.X).all() and np.isfinite(self.Y).all()):
            raise ContractError("problem data must be finite")

    @property
    def n(self) -> int:
        return self.X.shape[1]

    @property
    def m(self) -> int:
        return self.Y.shape[1]

    @property
    def s(self) -> int:
        return self.X.shape[0]

    def residual(self, W) -> np.ndarray:
        return self.Y - self.X @ W

    def loss(self, W) -> float:
        R = self.residual(W)
        return 0.5 * float((R * R).sum())


def random_problem(n: int, m: int, s: int, seed: int, consistent: bool = True) -> FlowProblem:
    """Gaussian samples; consistent targets come from a Gaussian ground-truth W."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(s, n))
    Y = X @ rng.normal(size=(n, m)) if consistent else rng.normal(size=(s, m))
    return FlowProblem(X, Y)


def _check(problem: FlowProblem, W=None, M=None):
    if W is not None and np.shape(W) != (problem.n, problem.m):
        raise ShapeError(f"W must be {(problem.n, problem.m)}, got {np.shape(W)}")
    if M is not None and np.shape(M) != (problem.n, problem.n):
        raise ShapeError(f"M must be {(problem.n, problem.n)}, got {np.shape(M)}")


def standard_flow_derivative(W, problem: FlowProblem) -> np.ndarray:
    """``sum_i x_i r_i^T`` with ``r_i = y_i - W^T x_i`` (the negative gradient)."""
    _check(problem, W)
    return problem.X.T @ problem.residual(W)


def nsl_flow_derivatives(Wp, M, problem: FlowProblem) -> tuple[np.ndarray, np.ndarray]:
    """Negative gradients of the factorized loss: ``(sum M x_i r_i^T, sum W' r_i x_i^T)``."""
    _check(problem, Wp, M)
    R = problem.residual(M.T @ Wp)
    return M @ problem.X.T @ R, Wp @ R.T @ problem.X


def composite_derivative(Wp, M, problem: FlowProblem) -> np.ndarray:
    """Time derivative of ``W = M^T W'`` in closed form: ``M^T M G + G W'^T W'`` with ``G = sum x_i r_i^T``."""
    _check(problem, Wp, M)
    G = problem.X.T @ problem.residual(M.T @ Wp)
    return M.T @ M @ G + G @ Wp.T @ Wp


@dataclass
class FlowState:
    """Either ``W`` (standard) or ``Wp`` and ``M`` (factorized) at time ``t``."""

    W: np.ndarray | None = None
    Wp: np.ndarray | None = None
    M: np.ndarray | None = None
    t: float = 0.0

    @property
    def mode(self) -> str:
        return "standard" if self.W is not None else "nsl"

    def composite(self) -> np.ndarray:
        return self.W if self.W is not None else self.M.T @ self.Wp

    def copy(self) -> "FlowState":
        c = lambda a: None if a is None else a.copy()
        return FlowState(c(self.W), c(self.Wp), c(self.M), self.t)

    def step(self, problem: FlowProblem, dt: float) -> "FlowState":
        """One forward-Euler step."""
        if self.W is not None:
            return FlowState(W=self.W + dt * standard_flow_derivative(self.W, problem), t=self.t + dt)
        dWp, dM = nsl_flow_derivatives(self.Wp, self.M, problem)
        return FlowState(Wp=self.Wp + dt * dWp, M=self.M + dt * dM, t=self.t + dt)


def initial_state(problem: FlowProblem, mode: str, seed: int = 0, init_std: float = 1e-3, M0=None) -> FlowState:
    """Standard: ``W0 = 0``.  Factorized: ``M0 = I`` (or given) and Gaussian ``W'0`` with std ``init_std``."""
    if mode == "standard":
        return FlowState(W=np.zeros((problem.n, problem.m)))
    if mode == "nsl":
        rng = np.random.default_rng(seed)
        M = np.eye(problem.n) if M0 is None else np.array(M0, dtype=np.float64)
        _check(problem, M=M)
        return FlowState(Wp=init_std * rng.normal(size=(problem.n, problem.m)), M=M)
    raise ConfigurationError(f"mode must be 'standard' or 'nsl', got {mode!r}")


def singular_values(W) -> np.ndarray:
    return np.linalg.svd(np.atleast_2d(W), compute_uv=False)


def numerical_rank(W, rel: float = 1e-8) -> int:
    s = singular_values(W)
    return int((s > rel * s.max()).sum()) if s.size and s.max() > 0 else 0


def nuclear_norm(W) -> float:
    """Sum of singular values from the eigenvalues of the smaller Gram matrix."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    G = W.T @ W if W.shape[1] <= W.shape[0] else W @ W.T
    return float(np.sqrt(np.clip(np.linalg.eigvalsh(G), 0.0, None)).sum())


def min_norm_solution(problem: FlowProblem, rcond: float = 1e-12) -> np.ndarray:
    """Least-norm interpolant ``X^T (X X^T)^{-1} Y`` through the sample Gram matrix."""
    X = problem.X
    gram = X @ X.T
    ev = np.linalg.eigvalsh(gram)
    if ev.min() <= rcond * max(ev.max(), 1e-300):
        raise ContractError(
            "sample matrix is rank deficient (samples are linearly dependent); "
            "use a regularized solve such as ridge least squares instead"
        )
    return X.T @ np.linalg.solve(gram, problem.Y)


def stability_threshold(problem: FlowProblem, state: FlowState | None = None) -> float:
    """Largest stable Euler step: ``2 / lambda_max(X^T X)`` for the standard flow.

    For the factorized flow the curvature is scaled by ``|M|_2^2 + |W'|_2^2``
    at the given state, which gives a local estimate.
    """
    lam = float(np.linalg.eigvalsh(problem.X.T @ problem.X).max())
    scale = 1.0
    if state is not None and state.mode == "nsl":
        scale = singular_values(state.M).max() ** 2 + singular_values(state.Wp).max(initial=0.0) ** 2
    return 2.0 / max(lam * scale, 1e-300)


@dataclass
class Trajectory:
    rows: list
    final: FlowState
    dt: float
    retries: int = 0
    stopped_early: bool = False
    composites: list = field(default_factory=list, repr=False)


def _row(state: FlowState, problem: FlowProblem, target) -> dict:
    W = state.composite()
    return {
        "t": state.t,
        "loss": problem.loss(W),
        "frob_norm": float(np.linalg.norm(W)),
        "nuclear_norm": nuclear_norm(W),
        "rank": numerical_rank(W),
        "distance_to_min_norm": math.nan if target is None else float(np.linalg.norm(W - target)),
    }


def _run(state, problem, dt, steps, stop_tol, target, keep):
    rows, comps = [_row(state, problem, target)], [state.composite().copy()] if keep else []
    for k in range(steps):
        if rows[-1]["loss"] < stop_tol:
            return rows, state, comps, True, None
        with np.errstate(over="ignore", invalid="ignore"):
            state = state.step(problem, dt)
        row = _row(state, problem, target) if np.isfinite(state.composite()).all() else None
        if row is None or not row["loss"] <= DIVERGENCE:
            return rows, state, comps, False, k + 1
        rows.append(row)
        if keep:
            comps.append(state.composite().copy())
    return rows, state, comps, False, None


def integrate(state: FlowState, problem: FlowProblem, dt: float = 1e-3, steps: int = 1000,
              stop_tol: float = 0.0, retries: int = 5, keep_composites: bool = False) -> Trajectory:
    """Forward-Euler trajectory with one diagnostics row per step.

    Stops early once the loss falls below ``stop_tol``.  When the loss
    exceeds 1e12 the run restarts from ``state`` with ``dt`` halved, up to
    ``retries`` times; after that it aborts with the step index.
    """
    if dt <= 0:
        raise ContractError(f"dt must be positive, got {dt}")
    try:
        target = min_norm_solution(problem)
    except ContractError:
        target = None
    for attempt in range(retries + 1):
        rows, final, comps, early, diverged = _run(state.copy(), problem, dt, steps, stop_tol, target, keep_composites)
        if diverged is None:
            return Trajectory(rows, final, dt, attempt, early, comps)
        if attempt < retries:
            dt /= 2
    raise TrainingError(f"gradient flow diverged at step {diverged} (dt={dt})", diverged)


def write_trajectory(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_FIELDS)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in TRAJECTORY_FIELDS])
