"""Reverse-mode gradients of the truncated barycenter energy.

For one datapoint ``x`` the energy is ``L(P^(L)(D, lambda), x)``; each
routine here returns the barycenter together with the gradient of that
energy in the atoms ``D`` and the weights ``lambda`` (ambient gradients,
not projected on the simplices). ``loss_grad(p, x)`` supplies the loss
gradient in its first argument and is applied unchanged.

Four independent routes are provided:

* :func:`sinkhorn_grads` - two backward loops, one per variable, over the
  stored ``b`` and ``phi`` histories.
* :func:`log_sinkhorn_grads` - the same recursion on log-magnitudes with
  explicit signs, usable when the scalings leave floating-point range.
* :func:`blockwise_grads` - the closed-form vector-Jacobian products of the
  per-iteration maps ``P = Psi(b)``, ``b' = Phi(b)`` chained backwards.
* :func:`generalized_grads` - backward pass for the extrapolated and
  KL-relaxed iterations.

Sign conventions. In the weight loop ``r_s`` is the cotangent of
``log b_s`` and ``g`` the cotangent of ``log p``; then ``g = +sum_s r_s``
and the new ``r_s`` uses ``lambda_s g - r_s``. In the dictionary loop
``z_s`` is the cotangent of ``b_s`` divided by ``phi_s`` and
``n = +sum_s z_s``. Flipping the sign of ``g`` breaks the finite
difference check, which is what ``_flip_sign`` exists to demonstrate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .barycenter import (
    BarycenterTrace,
    barycenter_forward,
    barycenter_generalized,
    barycenter_log_domain,
    _validate,
)
from .core import Kernel, ValidationError

BLOCKWISE_MAX_N = 64

LossGrad = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class GradientPack:
    barycenter: np.ndarray
    grad_atoms: np.ndarray
    grad_weights: np.ndarray
    trace: Optional[BarycenterTrace] = None


def _loss_grad(loss_grad, p, x):
    g = np.asarray(loss_grad(p, x), dtype=np.float64)
    if g.shape != p.shape:
        raise ValidationError(f"loss gradient has shape {g.shape}, expected {p.shape}")
    return g


def sinkhorn_grads(x, atoms, weights, kernel: Kernel, n_iter: int, loss_grad: LossGrad,
                   b0=None, _flip_sign: bool = False) -> GradientPack:
    """Forward barycenter loop followed by the weight and dictionary backward loops."""
    atoms, weights = _validate(atoms, weights, kernel, n_iter)
    tr = barycenter_forward(atoms, weights, kernel, n_iter, b0=b0)
    p = tr.P
    grad_p = _loss_grad(loss_grad, p, x)
    lam = weights[..., :, None]
    K = kernel

    # weights
    w = np.zeros(weights.shape)
    r = np.zeros(tr.b.shape[1:])
    g = grad_p * p
    for l in range(n_iter, 0, -1):
        phi = tr.phi[l - 1]
        b_prev = tr.b[l - 1]
        w += np.sum(np.log(phi) * g[..., None, :], axis=-1)
        kb = K.apply(b_prev)
        r = -K.apply(K.apply((lam * g[..., None, :] - r) / phi) * (atoms / kb) / kb,
                     transpose=True) * b_prev
        g = r.sum(axis=-2)
        if _flip_sign:
            g = -g

    # dictionary
    y = np.zeros(tr.b.shape[1:])
    z = np.zeros(tr.b.shape[1:])
    n = grad_p
    for l in range(n_iter, 0, -1):
        c = K.apply((lam * n[..., None, :] - z) * tr.b[l])
        kb = K.apply(tr.b[l - 1])
        y += c / kb
        if l > 1:
            # z at l = 1 would need phi^(0); it feeds nothing downstream.
            z = -K.apply((atoms / kb) * (c / kb), transpose=True) / tr.phi[l - 2]
            n = z.sum(axis=-2)

    return GradientPack(barycenter=p, grad_atoms=y, grad_weights=w, trace=tr)


def log_sinkhorn_grads(x, atoms, weights, kernel: Kernel, n_iter: int,
                       loss_grad: LossGrad, log_b0=None) -> GradientPack:
    """Gradients from the log-domain forward loop.

    Backward quantities can be negative, so kernel applications carry
    ``(log|v|, sign v)`` pairs through a signed log-sum-exp. Both
    gradients come out of a single backward sweep: the dictionary
    contribution at step ``l`` is ``K(h / phi) / K b^(l-1)``, and the
    first factor is already needed to propagate the weight cotangent.
    """
    atoms, weights = _validate(atoms, weights, kernel, n_iter)
    tr = barycenter_log_domain(atoms, weights, kernel, n_iter, log_b0=log_b0)
    p = tr.P
    grad_p = _loss_grad(loss_grad, p, x)
    lam = weights[..., :, None]
    K = kernel
    with np.errstate(divide="ignore"):
        logd = np.log(atoms)

    w = np.zeros(weights.shape)
    y = np.zeros(tr.b.shape[1:])
    beta = np.zeros(tr.b.shape[1:])
    g = grad_p * p
    for l in range(n_iter, 0, -1):
        logphi = tr.phi[l - 1]
        logb_prev = tr.b[l - 1]
        w += np.sum(logphi * g[..., None, :], axis=-1)
        h = lam * g[..., None, :] - beta
        with np.errstate(divide="ignore"):
            log_h = np.log(np.abs(h))
        log_a, sign_a = K.log_apply(log_h - logphi, np.sign(h))
        log_kb = K.log_apply(logb_prev)
        y += sign_a * np.exp(log_a - log_kb)
        if l > 1:
            log_t, sign_t = K.log_apply(log_a + logd - 2 * log_kb, sign_a, transpose=True)
            beta = -sign_t * np.exp(log_t + logb_prev)
            g = beta.sum(axis=-2)

    return GradientPack(barycenter=p, grad_atoms=y, grad_weights=w, trace=tr)


# ---------------------------------------------------------------------------
# closed-form Jacobian blocks
# ---------------------------------------------------------------------------


class _Blocks:
    """Transposed Jacobians of Psi and Phi evaluated at one scaling ``b``."""

    def __init__(self, kernel: Kernel, atoms, weights, b):
        self.K = kernel
        self.d = atoms
        self.lam = weights[..., :, None]
        self.kb = kernel.apply(b)
        self.phi = kernel.apply(atoms / self.kb, transpose=True)
        self.psi = np.prod(self.phi ** self.lam, axis=-2)
        self.Phi = self.psi[..., None, :] / self.phi

    def dphi_db_T(self, w):
        # [d phi_s / d b_s]^T w = -K^T diag(d_s / (K b_s)^2) K w, per atom
        return -self.K.apply(self.d / self.kb * (self.K.apply(w) / self.kb), transpose=True)

    def psi_b(self, u):
        return self.dphi_db_T(self.lam * (self.psi * u)[..., None, :] / self.phi)

    def psi_d(self, u):
        return self.lam * self.K.apply((self.psi * u)[..., None, :] / self.phi) / self.kb

    def psi_lam(self, u):
        return np.sum(np.log(self.phi) * (self.psi * u)[..., None, :], axis=-1)

    def phi_b(self, v):
        wv = v / self.phi
        m = self.lam * wv.sum(axis=-2, keepdims=True) - wv
        return self.dphi_db_T(self.Phi * m)

    def phi_d(self, v):
        wv = v / self.phi
        m = self.lam * wv.sum(axis=-2, keepdims=True) - wv
        return self.K.apply(self.Phi * m) / self.kb

    def phi_lam(self, v):
        # sum_s <Phi_s log phi_i, v_s>
        return np.einsum("...in,...n->...i", np.log(self.phi), np.sum(self.Phi * v, axis=-2))


def blockwise_grads(x, atoms, weights, kernel: Kernel, n_iter: int,
                 loss_grad: LossGrad, b0=None) -> GradientPack:
    """Gradients as a sum of per-iteration Jacobian blocks.

    With ``u`` the loss gradient and ``v^(l)`` the cotangent of ``b^(l)``::

        grad_D = Psi_D^(L-1)(u) + sum_{l=0}^{L-2} Phi_D^(l)(v^(l+1))
        v^(L-1) = Psi_b^(L-1)(u),   v^(l-1) = Phi_b^(l-1)(v^(l))

    and likewise for the weights. Every block is a matrix-free product.
    """
    atoms, weights = _validate(atoms, weights, kernel, n_iter)
    if kernel.size > BLOCKWISE_MAX_N:
        raise ValidationError(
            f"blockwise_grads is a desk-scale cross-check (N <= {BLOCKWISE_MAX_N}); "
            "use sinkhorn_grads for larger grids"
        )
    tr = barycenter_forward(atoms, weights, kernel, n_iter, b0=b0)
    u = _loss_grad(loss_grad, tr.P, x)
    top = _Blocks(kernel, atoms, weights, tr.b[n_iter - 1])
    gd = top.psi_d(u)
    gl = top.psi_lam(u)
    if n_iter >= 2:
        v = top.psi_b(u)
        for l in range(n_iter - 2, -1, -1):
            blk = _Blocks(kernel, atoms, weights, tr.b[l])
            gd = gd + blk.phi_d(v)
            gl = gl + blk.phi_lam(v)
            if l >= 1:
                v = blk.phi_b(v)
    return GradientPack(barycenter=tr.P, grad_atoms=gd, grad_weights=gl, trace=tr)


# ---------------------------------------------------------------------------
# extrapolated / unbalanced iterations
# ---------------------------------------------------------------------------


def generalized_grads(x, atoms, weights, kernel: Kernel, n_iter: int,
                      loss_grad: LossGrad, tau: float = 0.0, rho: float = math.inf,
                      b0=None) -> GradientPack:
    """Backward pass through the extrapolated, KL-relaxed barycenter loop.

    Cotangents are carried on ``log a`` and ``log b``; the initial
    scalings are constants.
    """
    atoms, weights = _validate(atoms, weights, kernel, n_iter)
    tr = barycenter_generalized(atoms, weights, kernel, n_iter, tau=tau, rho=rho, b0=b0)
    tau, rho = tr.tau, tr.rho
    balanced = math.isinf(rho)
    kappa = 1.0 if balanced else rho / (rho + kernel.gamma)
    omega = 0.0 if balanced else kernel.gamma / (rho + kernel.gamma)
    K = kernel
    lam = weights[..., :, None]

    grad_p = _loss_grad(loss_grad, tr.P, x)
    gd = np.zeros(tr.b.shape[1:])
    gl = np.zeros(weights.shape)
    cb = np.zeros(tr.b.shape[1:])  # cotangent of log b^(l)
    ca = np.zeros(tr.b.shape[1:])  # cotangent of log a^(l)
    step = (1 - tau) * kappa
    for l in range(n_iter, 0, -1):
        psi, p, kb = tr.phi[l - 1], tr.p[l - 1], tr.kb[l - 1]
        # log b^(l) = tau log b^(l-1) + (1-tau) kappa (log p - log psi)
        cp = step * cb.sum(axis=-2)
        if l == n_iter:
            cp = cp + grad_p * p
        cpsi = -step * cb
        cb_prev = tau * cb
        # p from psi
        if balanced:
            cpsi = cpsi + lam * cp[..., None, :]
            gl += np.sum(np.log(psi) * cp[..., None, :], axis=-1)
        else:
            pw = psi ** omega
            tot = np.sum(lam * pw, axis=-2, keepdims=True)
            cpsi = cpsi + lam * pw / tot * cp[..., None, :]
            gl += np.sum(pw / (omega * tot) * cp[..., None, :], axis=-1)
        # psi = K^T a
        ca = ca + K.apply(cpsi / psi) * tr.a[l]
        # log a^(l) = tau log a^(l-1) + (1-tau) kappa (log d - log K b^(l-1))
        gd += step * ca / atoms
        ckb = -step * ca
        cb_prev = cb_prev + K.apply(ckb / kb, transpose=True) * tr.b[l - 1]
        ca = tau * ca
        cb = cb_prev
    return GradientPack(barycenter=tr.P, grad_atoms=gd, grad_weights=gl, trace=tr)
