"""Reference computations used to check the solvers.

Nothing here imports the Sinkhorn or barycenter code: the point of these
routines is to be an independent second opinion.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import ParameterError, ValidationError


@dataclass(frozen=True)
class FDSpec:
    step: float = 1e-6
    tangent_projection: bool = False

    def __post_init__(self):
        if not self.step > 0:
            raise ParameterError("finite-difference step must be positive")


def fd_gradient(f: Callable[[np.ndarray], float], at, spec: FDSpec = FDSpec()) -> np.ndarray:
    """Central differences of ``f`` at ``at``, one coordinate at a time.

    With ``tangent_projection`` the perturbation directions are
    ``e_i - 1/n`` along the last axis, so the result is the gradient
    projected on the simplex tangent space (mean removed per row).
    """
    x = np.array(at, dtype=np.float64)
    h = spec.step
    out = np.empty_like(x)
    n = x.shape[-1]
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = 1.0
        if spec.tangent_projection:
            e[idx[:-1]] -= 1.0 / n
        fp = f(x + h * e)
        fm = f(x - h * e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValidationError(f"function is not finite near coordinate {idx}")
        out[idx] = (fp - fm) / (2 * h)
    return out


@dataclass(frozen=True)
class DualSolution:
    f: np.ndarray
    g: np.ndarray
    value: float
    plan: np.ndarray
    iterations: int


def _dual(f, g, p, q, C, gamma):
    z = (f[:, None] + g[None, :] - C) / gamma
    t = np.exp(z)
    return f @ p + g @ q - gamma * t.sum(), t


def dual_ascent_ot(p, q, C, gamma: float, tol: float = 1e-13,
                   max_iter: int = 1_000_000) -> DualSolution:
    """Maximize the smooth entropic dual by damped Newton ascent.

    The dual is ``<f, p> + <g, q> - gamma * sum exp((f_i + g_j - C_ij)/gamma)``
    whose maximum equals ``min <T, C> + gamma * sum T (log T - 1)``. The
    shift ``(f + c, g - c)`` is fixed by pinning ``g[0] = 0``. Stops when the
    marginal residual (the dual gradient) has L1 norm below ``tol``.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    n = p.size
    if n > 32:
        raise ValidationError("dual_ascent_ot is a small-scale oracle (N <= 32)")
    if not gamma > 0:
        raise ParameterError("gamma must be positive")
    f = np.zeros(n)
    g = np.zeros(n)
    val, t = _dual(f, g, p, q, C, gamma)
    for it in range(1, max_iter + 1):
        rows, cols = t.sum(1), t.sum(0)
        grad = np.concatenate([p - rows, q - cols])
        if np.abs(grad).sum() <= tol:
            return DualSolution(f, g, float(val), t, it - 1)
        hess = -np.block([[np.diag(rows), t], [t.T, np.diag(cols)]]) / gamma
        keep = np.r_[np.arange(n), np.arange(n + 1, 2 * n)]
        step = np.zeros(2 * n)
        h_red = hess[np.ix_(keep, keep)]
        # tiny ridge keeps the solve defined when some marginal mass is zero
        ridge = 1e-14 * np.abs(np.diag(h_red)).max()
        step[keep] = np.linalg.solve(h_red - ridge * np.eye(keep.size), -grad[keep])
        slope = grad @ step
        if not slope > 0:
            step = grad.copy()
            step[n] = 0.0
            slope = grad @ step
        s = 1.0
        resid = np.abs(grad).sum()
        while True:
            nf, ng = f + s * step[:n], g + s * step[n:]
            nval, nt = _dual(nf, ng, p, q, C, gamma)
            if not np.isfinite(nval):
                pass
            elif nval >= val + 1e-4 * s * slope:
                break
            elif (np.abs(p - nt.sum(1)).sum() + np.abs(q - nt.sum(0)).sum()) <= 0.5 * resid:
                # near the optimum the value change drowns in rounding; the
                # residual still certifies progress
                break
            s *= 0.5
            if s < 1e-20:
                # no further progress possible at this precision
                return DualSolution(f, g, float(val), t, it)
        f, g, val, t = nf, ng, nval, nt
    raise ValidationError(f"dual ascent did not reach tol={tol} in {max_iter} iterations")


def rank_k_baseline(data, k: int) -> float:
    """Squared Frobenius error of the best uncentered rank-``k`` approximation."""
    x = np.asarray(data, dtype=np.float64)
    if k < 0 or k > min(x.shape):
        raise ParameterError(f"rank must be in [0, {min(x.shape)}], got {k}")
    s = np.linalg.svd(x, compute_uv=False)
    return float(np.sum(s[k:] ** 2))


def rank_k_reconstruction(data, k: int) -> np.ndarray:
    x = np.asarray(data, dtype=np.float64)
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    return (u[:, :k] * s[:k]) @ vt[:k]
