"""Forward solvers for entropic Wasserstein barycenters.

Every solver runs a fixed number of generalized Sinkhorn iterations and
returns a :class:`BarycenterTrace` holding what the backward passes in
:mod:`wdl.grad` read. Atoms have shape ``(S, N)``; weights have shape
``(..., S)`` and every other array carries the same leading batch axes,
so a whole dataset can be pushed through one loop.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    InstabilityError,
    Kernel,
    ParameterError,
    ValidationError,
    _log_apply_axis,
    bad_rows,
)


@dataclass
class BarycenterTrace:
    """Forward history of one barycenter computation.

    ``b`` holds ``b^(0..L)`` (shape ``(L+1, ..., S, N)``) and ``phi`` holds
    ``K^T (d_s / K b_s^(l-1))`` for ``l = 1..L``. In log mode both are logs
    and ``log_domain`` is set. The generalized solver also keeps ``a``,
    ``kb`` and ``p`` histories for its own backward pass.
    """

    P: np.ndarray
    b: np.ndarray
    phi: np.ndarray
    residuals: np.ndarray
    log_domain: bool = False
    logP: Optional[np.ndarray] = None
    a: Optional[np.ndarray] = None
    kb: Optional[np.ndarray] = None
    p: Optional[np.ndarray] = None
    tau: float = 0.0
    rho: float = math.inf

    @property
    def n_iter(self) -> int:
        return self.phi.shape[0]

    @property
    def final_b(self) -> np.ndarray:
        return self.b[-1]


def _validate(atoms, weights, kernel: Kernel, n_iter: int):
    atoms = np.asarray(atoms, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if atoms.ndim != 2 or atoms.shape[1] != kernel.size:
        raise ValidationError(
            f"atoms must have shape (S, {kernel.size}), got {atoms.shape}"
        )
    if weights.shape[-1] != atoms.shape[0]:
        raise ValidationError("weights length does not match the number of atoms")
    if np.any(atoms < 0) or not np.all(np.isfinite(atoms)):
        raise ValidationError("atoms must be finite and nonnegative")
    if n_iter < 1:
        raise ParameterError("n_iter must be >= 1")
    return atoms, weights


def _init_b(b0, shape):
    if b0 is None:
        return np.ones(shape)
    b0 = np.array(b0, dtype=np.float64)
    if b0.shape != shape:
        raise ValidationError(f"initial scalings must have shape {shape}, got {b0.shape}")
    return b0


def geometric_mean(phi: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """prod_s phi_s ** lambda_s over the atom axis (-2)."""
    return np.prod(phi ** weights[..., :, None], axis=-2)


def fixed_point_residual(b_new, b_old) -> float:
    """max_s ||b_new - b_old||_inf / ||b_new||_inf."""
    num = np.max(np.abs(b_new - b_old), axis=-1)
    den = np.max(np.abs(b_new), axis=-1)
    return float(np.max(num / den))


def barycenter_forward(atoms, weights, kernel: Kernel, n_iter: int, b0=None) -> BarycenterTrace:
    """Plain generalized Sinkhorn barycenter, ``b^(0) = 1`` unless ``b0`` is given."""
    atoms, weights = _validate(atoms, weights, kernel, n_iter)
    shape = weights.shape[:-1] + atoms.shape
    b = _init_b(b0, shape)
    bs = np.empty((n_iter + 1,) + shape)
    phis = np.empty((n_iter,) + shape)
    res = np.empty(n_iter)
    bs[0] = b
    with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
        for l in range(1, n_iter + 1):
            phi = kernel.apply(atoms / kernel.apply(b), transpose=True)
            p = geometric_mean(phi, weights)
            b_new = p[..., None, :] / phi
            if not np.all(np.isfinite(b_new)):
                raise InstabilityError("barycenter", l, bad_rows(b_new))
            res[l - 1] = fixed_point_residual(b_new, b)
            b = b_new
            bs[l] = b
            phis[l - 1] = phi
    return BarycenterTrace(P=p, b=bs, phi=phis, residuals=res)


def barycenter_generalized(atoms, weights, kernel: Kernel, n_iter: int,
                           tau: float = 0.0, rho: float = math.inf,
                           b0=None) -> BarycenterTrace:
    """Generalized Sinkhorn with extrapolation ``tau <= 0`` and KL relaxation ``rho``.

    ``a^(0)`` is taken as ones, like ``b^(0)``. ``rho = inf`` and ``tau = 0``
    give exactly the plain iterations.
    """
    atoms, weights = _validate(atoms, weights, kernel, n_iter)
    tau = float(tau)
    rho = float(rho)
    if tau > 0:
        raise ParameterError(f"tau must be <= 0, got {tau}")
    if not rho > 0:
        raise ParameterError(f"rho must be positive, got {rho}")
    balanced = math.isinf(rho)
    kappa = 1.0 if balanced else rho / (rho + kernel.gamma)
    omega = 0.0 if balanced else kernel.gamma / (rho + kernel.gamma)

    shape = weights.shape[:-1] + atoms.shape
    b = _init_b(b0, shape)
    a = np.ones(shape)
    bs = np.empty((n_iter + 1,) + shape)
    as_ = np.empty((n_iter + 1,) + shape)
    psis = np.empty((n_iter,) + shape)
    kbs = np.empty((n_iter,) + shape)
    ps = np.empty((n_iter,) + shape[:-2] + shape[-1:])
    res = np.empty(n_iter)
    bs[0] = b
    as_[0] = a
    with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
        for l in range(1, n_iter + 1):
            kb = kernel.apply(b)
            a_t = atoms / kb
            if not balanced:
                a_t = a_t ** kappa
            a = a_t if tau == 0 else a ** tau * a_t ** (1 - tau)
            psi = kernel.apply(a, transpose=True)
            if balanced:
                p = geometric_mean(psi, weights)
            else:
                p = np.sum(weights[..., :, None] * psi ** omega, axis=-2) ** (1 / omega)
            b_t = p[..., None, :] / psi
            if not balanced:
                b_t = b_t ** kappa
            b_new = b_t if tau == 0 else b ** tau * b_t ** (1 - tau)
            if not (np.all(np.isfinite(b_new)) and np.all(np.isfinite(a))):
                raise InstabilityError("generalized barycenter", l, bad_rows(b_new * a))
            res[l - 1] = fixed_point_residual(b_new, b)
            b = b_new
            bs[l], as_[l] = b, a
            psis[l - 1], kbs[l - 1], ps[l - 1] = psi, kb, p
    return BarycenterTrace(P=p, b=bs, phi=psis, residuals=res, a=as_, kb=kbs, p=ps,
                           tau=tau, rho=rho)


def barycenter_heavyball(atoms, weights, kernel: Kernel, n_iter: int, tau: float,
                         b0=None) -> BarycenterTrace:
    return barycenter_generalized(atoms, weights, kernel, n_iter, tau=tau, b0=b0)


def barycenter_unbalanced(atoms, weights, kernel: Kernel, n_iter: int, rho: float,
                          tau: float = 0.0, b0=None) -> BarycenterTrace:
    if math.isinf(float(rho)):
        raise ParameterError("unbalanced barycenters need a finite rho")
    return barycenter_generalized(atoms, weights, kernel, n_iter, tau=tau, rho=rho, b0=b0)


def log_separable_kernel(axis_costs, gamma: float, v) -> np.ndarray:
    """log(K exp(v)) for a kernel whose cost is a sum of per-axis costs.

    ``v`` is an image of shape ``(n_1, ..., n_d)`` (or any leading batch
    axes followed by it). Each axis is reduced by a max-shifted
    log-sum-exp, so nothing is exponentiated outside ``(-inf, 0]``.
    """
    if not gamma > 0:
        raise ParameterError("gamma must be positive")
    v = np.asarray(v, dtype=np.float64)
    d = len(axis_costs)
    lead = v.ndim - d
    if lead < 0:
        raise ValidationError("image has fewer axes than the cost")
    for k, c in enumerate(axis_costs):
        v = _log_apply_axis(-np.asarray(c, dtype=np.float64) / gamma, v, lead + k)
    return v


def _lam_times(weights, logphi):
    w = weights[..., :, None]
    with np.errstate(invalid="ignore"):
        return np.where(w > 0, w * logphi, 0.0)


def barycenter_log_domain(atoms, weights, kernel: Kernel, n_iter: int,
                          log_b0=None) -> BarycenterTrace:
    """Barycenter iterations carried entirely on logs of the scalings."""
    atoms, weights = _validate(atoms, weights, kernel, n_iter)
    if not kernel.separable:
        warnings.warn(
            "log-domain kernel applications on a dense cost cost O(N^2) per call",
            RuntimeWarning,
            stacklevel=2,
        )
    shape = weights.shape[:-1] + atoms.shape
    logb = np.zeros(shape) if log_b0 is None else _init_b(log_b0, shape)
    with np.errstate(divide="ignore"):
        logd = np.log(atoms)
    logbs = np.empty((n_iter + 1,) + shape)
    logphis = np.empty((n_iter,) + shape)
    res = np.empty(n_iter)
    logbs[0] = logb
    for l in range(1, n_iter + 1):
        logphi = kernel.log_apply(logd - kernel.log_apply(logb), transpose=True)
        logp = np.sum(_lam_times(weights, logphi), axis=-2)
        logb_new = logp[..., None, :] - logphi
        res[l - 1] = float(np.max(np.abs(logb_new - logb)))
        logb = logb_new
        logbs[l] = logb
        logphis[l - 1] = logphi
    return BarycenterTrace(P=np.exp(logp), b=logbs, phi=logphis, residuals=res,
                           log_domain=True, logP=logp)


def barycenter(atoms, weights, kernel: Kernel, n_iter: int, tau: float = 0.0,
               rho: float = math.inf, log_domain: bool = False) -> np.ndarray:
    """Dispatch to the right forward solver and return only the barycenter."""
    if log_domain:
        if tau != 0 or not math.isinf(rho):
            raise ParameterError("the log-domain solver supports only tau=0, rho=inf")
        return barycenter_log_domain(atoms, weights, kernel, n_iter).P
    if tau == 0 and math.isinf(rho):
        return barycenter_forward(atoms, weights, kernel, n_iter).P
    return barycenter_generalized(atoms, weights, kernel, n_iter, tau=tau, rho=rho).P
