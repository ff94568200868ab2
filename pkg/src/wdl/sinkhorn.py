"""Entropic optimal transport between two histograms by Sinkhorn scaling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import InstabilityError, Kernel, ParameterError, ValidationError


@dataclass(frozen=True)
class SinkhornState:
    """Scalings after ``n_iter`` update pairs.

    ``a`` scales the columns (target ``q``), ``b`` the rows (source ``p``),
    so the plan is ``diag(b) K diag(a)``.
    """

    a: np.ndarray
    b: np.ndarray
    n_iter: int
    p: np.ndarray
    q: np.ndarray


@dataclass(frozen=True)
class TransportPlan:
    matrix: np.ndarray
    marginal_error: tuple


def _check_pair(p, q, k: Kernel):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape[-1] != k.size or q.shape[-1] != k.size:
        raise ValidationError("histogram length does not match the kernel")
    if np.any(p < 0) or np.any(q < 0):
        raise ValidationError("histograms must be nonnegative")
    return p, q


def marginal_residual(state: SinkhornState, k: Kernel):
    """L1 distances of the current plan's row and column sums to ``p`` and ``q``."""
    rows = state.b * k.apply(state.a)
    cols = state.a * k.apply(state.b, transpose=True)
    return (np.abs(rows - state.p).sum(-1), np.abs(cols - state.q).sum(-1))


def sinkhorn_run(p, q, k: Kernel, n_iter: int, tol: Optional[float] = None,
                 b0=None) -> SinkhornState:
    """Alternate ``a = q / K^T b`` and ``b = p / K a`` starting from ``b0`` (ones).

    With ``tol`` the loop stops early once the column residual (measured
    before the a-update) drops below it; ``n_iter`` is then an upper bound.
    """
    p, q = _check_pair(p, q, k)
    if n_iter < 1:
        raise ParameterError("n_iter must be >= 1")
    b = np.ones_like(p) if b0 is None else np.array(b0, dtype=np.float64)
    a = None
    it = 0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for it in range(1, n_iter + 1):
            ktb = k.apply(b, transpose=True)
            if tol is not None and a is not None:
                if np.all(np.abs(a * ktb - q).sum(-1) <= tol):
                    it -= 1
                    break
            a = q / ktb
            b = p / k.apply(a)
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                raise InstabilityError("sinkhorn", it)
    return SinkhornState(a=a, b=b, n_iter=it, p=p, q=q)


def extract_plan(state: SinkhornState, k: Kernel) -> TransportPlan:
    t = state.b[:, None] * k.matrix() * state.a[None, :]
    err = (float(np.abs(t.sum(1) - state.p).sum()), float(np.abs(t.sum(0) - state.q).sum()))
    return TransportPlan(matrix=t, marginal_error=err)


def _xlogy(x, y):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > 0, x * np.log(y), 0.0)


def plan_value(state: SinkhornState, k: Kernel) -> np.ndarray:
    """<T, C> + gamma * sum T (log T - 1) for T = diag(b) K diag(a).

    Uses log T_ij = log b_i + log a_j - C_ij / gamma, so the cost matrix
    never needs to be formed.
    """
    rows = state.b * k.apply(state.a)
    cols = state.a * k.apply(state.b, transpose=True)
    total = rows.sum(-1)
    return k.gamma * (_xlogy(rows, state.b).sum(-1) + _xlogy(cols, state.a).sum(-1) - total)


def ot_cost(p, q, k: Kernel, n_iter: int, tol: Optional[float] = None):
    """Entropic OT value and its gradient in ``p``.

    The gradient is the row-side dual potential ``gamma * log b``, shifted
    to zero mean (it is only defined up to a constant on the simplex).
    """
    state = sinkhorn_run(p, q, k, n_iter, tol=tol)
    value = plan_value(state, k)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = k.gamma * np.log(state.b)
        grad = f - f.mean(axis=-1, keepdims=True)
    return value, grad
