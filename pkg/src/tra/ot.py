"""Balanced sample-to-predictor assignment.

``sinkhorn_plan`` solves the entropic relaxation in the log domain;
``brute_force_plan`` enumerates every binary assignment and serves as the
exact oracle on small instances.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from .numerics import NumericalError

log = logging.getLogger(__name__)


@dataclass
class SinkhornConfig:
    epsilon: float = 0.05
    relative: bool = True  # epsilon scales with mean(L)
    max_iters: int = 200
    tol: float = 1e-4
    # warm-start through a geometric ladder of larger epsilons
    anneal: bool = True
    stage_iters: int = 20

    def validate(self) -> None:
        if self.epsilon <= 0:
            raise ValueError("sinkhorn.epsilon must be > 0")
        if self.max_iters < 1:
            raise ValueError("sinkhorn.max_iters must be >= 1")
        if self.tol <= 0:
            raise ValueError("sinkhorn.tol must be > 0")


@dataclass
class TransportPlan:
    P: np.ndarray
    row_marginals: np.ndarray
    col_marginals: np.ndarray
    mode: str = "fractional"
    iterations: int = 0
    violation: float = 0.0
    converged: bool = True
    history: list[float] = field(default_factory=list)


def build_loss_matrix(heads_outputs, labels) -> np.ndarray:
    y_hat = np.atleast_2d(np.asarray(heads_outputs, dtype=np.float64))
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.shape[0] != y_hat.shape[0]:
        raise ValueError(f"{y.shape[0]} labels for {y_hat.shape[0]} rows")
    L = (y_hat - y[:, None]) ** 2
    if not np.all(np.isfinite(L)):
        raise NumericalError("non-finite loss matrix")
    return L


def _check_shares(shares, K: int) -> np.ndarray:
    nu = np.asarray(shares, dtype=np.float64).reshape(-1)
    if nu.shape[0] != K:
        raise ValueError(f"{nu.shape[0]} shares for K={K}")
    if np.any(nu <= 0) or abs(nu.sum() - 1.0) > 1e-9:
        raise ValueError("shares must be positive and sum to 1")
    return nu


def marginal_violation(P: np.ndarray, row: np.ndarray, col: np.ndarray) -> float:
    return float(max(np.abs(P.sum(axis=1) - row).max(), np.abs(P.sum(axis=0) - col).max()))


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    # scipy.special.logsumexp carries ~0.2 ms of dispatch per call, which
    # dominates the per-batch Sinkhorn loop; inputs here are always finite
    m = x.max(axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.exp(x - m).sum(axis=axis))


def _scaling_loop(log_kernel, f, g, log_row, log_col, row, max_iters, tol, history):
    violation, it = math.inf, 0
    for it in range(1, max_iters + 1):
        f = log_row - _lse(log_kernel + g[None, :], axis=1)
        g = log_col - _lse(log_kernel + f[:, None], axis=0)
        # columns are exact after the g-update, only rows can be off
        P = np.exp(log_kernel + f[:, None] + g[None, :])
        violation = float(np.abs(P.sum(axis=1) - row).max())
        if history is not None:
            history.append(violation)
        if violation < tol:
            break
    return f, g, violation, it


def sinkhorn_plan(L, shares, cfg: SinkhornConfig | None = None) -> TransportPlan:
    cfg = cfg or SinkhornConfig()
    cfg.validate()
    L = np.atleast_2d(np.asarray(L, dtype=np.float64))
    n, K = L.shape
    nu = _check_shares(shares, K)
    row = np.ones(n)
    col = nu * n
    eps = cfg.epsilon * float(L.mean()) if cfg.relative else cfg.epsilon
    if eps <= 0:  # all-zero loss matrix: every plan is optimal
        eps = cfg.epsilon
    log_row, log_col = np.log(row), np.log(col)
    # dual potentials kept in loss units so they carry over between epsilons
    u, v = np.zeros(n), np.zeros(K)
    spread = float(L.max() - L.min())
    stage_eps = []
    e = spread
    while cfg.anneal and e > 2 * eps:
        stage_eps.append(e)
        e /= 4
    for e in stage_eps:
        f, g, _, _ = _scaling_loop(-L / e, u / e, v / e, log_row, log_col, row, cfg.stage_iters, cfg.tol, None)
        u, v = f * e, g * e
    history: list[float] = []
    log_kernel = -L / eps
    f, g, violation, it = _scaling_loop(log_kernel, u / eps, v / eps, log_row, log_col, row, cfg.max_iters, cfg.tol, history)
    P = np.exp(log_kernel + f[:, None] + g[None, :])
    converged = violation < cfg.tol
    if not converged and violation > 10 * cfg.tol:
        log.warning("sinkhorn did not converge: violation %.3g after %d iterations", violation, it)
    return TransportPlan(P, row, col, "fractional", it, violation, converged, history)


def transport_cost(P, L) -> float:
    P = P.P if isinstance(P, TransportPlan) else np.asarray(P, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    if P.shape != L.shape:
        raise ValueError(f"plan shape {P.shape} != loss shape {L.shape}")
    return float(np.sum(P * L))


def capacities_from_shares(shares, n: int) -> np.ndarray:
    caps = np.asarray(shares, dtype=np.float64) * n
    rounded = np.rint(caps)
    if np.any(np.abs(caps - rounded) > 1e-9):
        raise ValueError(f"capacities {caps} are not integral")
    return rounded.astype(int)


def brute_force_plan(L, shares, max_n: int = 12, max_k: int = 4) -> TransportPlan:
    """Exact minimiser of <P, L> over binary plans with integral capacities."""
    L = np.atleast_2d(np.asarray(L, dtype=np.float64))
    n, K = L.shape
    nu = _check_shares(shares, K)
    if n > max_n or K > max_k:
        raise OverflowError(f"instance {n}x{K} exceeds oracle scale {max_n}x{max_k}")
    caps = capacities_from_shares(nu, n)

    best_cost, best_assign = math.inf, None

    def assign(rows: tuple[int, ...], k: int, partial: list[tuple[tuple[int, ...], int]], cost: float):
        nonlocal best_cost, best_assign
        if k == K - 1:
            total = cost + L[list(rows), k].sum()
            if total < best_cost:
                best_cost, best_assign = total, partial + [(rows, k)]
            return
        for chosen in itertools.combinations(rows, caps[k]):
            rest = tuple(r for r in rows if r not in chosen)
            assign(rest, k + 1, partial + [(chosen, k)], cost + L[list(chosen), k].sum())

    assign(tuple(range(n)), 0, [], 0.0)
    P = np.zeros((n, K))
    for rows, k in best_assign:
        P[list(rows), k] = 1.0
    return TransportPlan(P, np.ones(n), caps.astype(float), "hard", 0, 0.0, True)


def round_plan(plan: TransportPlan) -> TransportPlan:
    """Row-argmax rounding with greedy capacity repair (diagnostics only)."""
    P = plan.P
    n, K = P.shape
    caps = np.floor(plan.col_marginals + 1e-9).astype(int)
    # distribute the leftover seats to the columns with largest fractional parts
    short = n - caps.sum()
    if short > 0:
        frac = plan.col_marginals - caps
        for k in np.argsort(-frac, kind="stable")[:short]:
            caps[k] += 1
    order = np.argsort(-P.max(axis=1), kind="stable")
    hard = np.zeros_like(P)
    used = np.zeros(K, dtype=int)
    for i in order:
        for k in np.argsort(-P[i], kind="stable"):
            if used[k] < caps[k]:
                hard[i, k] = 1.0
                used[k] += 1
                break
    return TransportPlan(hard, plan.row_marginals, caps.astype(float), "hard", plan.iterations, 0.0, True)
