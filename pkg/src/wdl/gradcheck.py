"""Finite-difference audit of the barycenter gradients on small instances."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from .barycenter import barycenter_forward, barycenter_log_domain
from .core import CostSpec, Grid, build_kernel
from .grad import log_sinkhorn_grads, blockwise_grads, sinkhorn_grads
from .losses import KINDS, Loss
from .oracle import FDSpec, fd_gradient

VARIANTS = ("plain", "log", "blockwise")
MAX_N = 16


@dataclass
class CaseResult:
    loss: str
    variant: str
    n: int
    s: int
    n_iter: int
    gamma: float
    err_atoms: float
    err_weights: float

    @property
    def worst(self) -> float:
        return max(self.err_atoms, self.err_weights)


def random_instance(rng, n: int, s: int):
    """Strictly positive atoms, a weight vector and a datapoint, all on simplices."""
    atoms = rng.uniform(0.1, 1.0, (s, n))
    atoms /= atoms.sum(-1, keepdims=True)
    weights = rng.dirichlet(np.ones(s))
    x = rng.uniform(0.1, 1.0, n)
    return atoms, weights, x / x.sum()


def _tangent(g):
    return g - g.mean(axis=-1, keepdims=True)


def rel_err(a, b) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def make_loss(kind: str, kernel) -> Loss:
    # tight inner solve so the loss value is differentiable to FD accuracy
    return Loss(kind, kernel=kernel, inner_iters=5000, inner_tol=1e-14)


def check_case(loss_kind: str, variant: str, n: int, s: int, n_iter: int, gamma: float,
               seed: int = 0, flip_sign: bool = False, step: float = 1e-6) -> CaseResult:
    """Relative error of one analytic route against central differences of E_L.

    Both gradients are compared on the simplex tangent spaces, since the
    energy is only ever evaluated on simplices.
    """
    rng = np.random.default_rng(seed)
    atoms, weights, x = random_instance(rng, n, s)
    kernel = build_kernel(CostSpec(Grid((n,))), gamma)
    loss = make_loss(loss_kind, kernel)

    if variant == "log":
        def energy(d, lam):
            return float(loss.value(barycenter_log_domain(d, lam, kernel, n_iter).P, x))
        pack = log_sinkhorn_grads(x, atoms, weights, kernel, n_iter, loss.grad)
    else:
        def energy(d, lam):
            return float(loss.value(barycenter_forward(d, lam, kernel, n_iter).P, x))
        if variant == "plain":
            pack = sinkhorn_grads(x, atoms, weights, kernel, n_iter, loss.grad,
                                  _flip_sign=flip_sign)
        else:
            pack = blockwise_grads(x, atoms, weights, kernel, n_iter, loss.grad)

    spec = FDSpec(step=step, tangent_projection=True)
    fd_d = fd_gradient(lambda d: energy(d, weights), atoms, spec)
    fd_l = fd_gradient(lambda lam: energy(atoms, lam), weights, spec)
    return CaseResult(loss_kind, variant, n, s, n_iter, gamma,
                      rel_err(_tangent(pack.grad_atoms), fd_d),
                      rel_err(_tangent(pack.grad_weights), fd_l))


def run_gradcheck(gamma: float = 1.0, n_iters=(1, 3, 10), n: int = 8, s: int = 2,
                  losses=KINDS, variants=VARIANTS, seed: int = 0,
                  flip_sign: bool = False) -> List[CaseResult]:
    if n > MAX_N:
        raise ValueError(f"gradcheck is limited to N <= {MAX_N}, got {n}")
    out = []
    for kind in losses:
        for variant in variants:
            for L in n_iters:
                out.append(check_case(kind, variant, n, s, L, gamma, seed=seed,
                                      flip_sign=flip_sign and variant == "plain"))
    return out
