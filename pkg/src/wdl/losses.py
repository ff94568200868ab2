"""Fitting losses L(p, q) with gradients in the first argument."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import Kernel, ParameterError, ValidationError
from .sinkhorn import plan_value, sinkhorn_run

KINDS = ("tv", "quadratic", "kl", "wasserstein")
_ALIASES = {
    "total-variation": "tv",
    "total_variation": "tv",
    "l2": "quadratic",
    "kullback-leibler": "kl",
    "w": "wasserstein",
}


@dataclass(frozen=True)
class Loss:
    """One of the four fitting losses.

    ``kl_printed_gradient`` switches the KL gradient to ``log(p/q) - 1``;
    the default ``log(p/q)`` is the exact derivative. The Wasserstein loss
    needs the problem kernel and runs ``inner_iters`` Sinkhorn iterations
    (stopping early at ``inner_tol`` if given).
    """

    kind: str = "quadratic"
    kernel: Optional[Kernel] = None
    inner_iters: int = 100
    inner_tol: Optional[float] = None
    kl_printed_gradient: bool = False

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        if kind not in KINDS:
            raise ParameterError(f"unknown loss {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        if kind == "wasserstein":
            if self.kernel is None:
                raise ParameterError("the Wasserstein loss needs a kernel")
            if self.inner_iters < 1:
                raise ParameterError("inner_iters must be >= 1")

    def value(self, p, q) -> np.ndarray:
        return loss_value(self, p, q)

    def grad(self, p, q) -> np.ndarray:
        return loss_grad(self, p, q)


def _pair(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValidationError(f"shape mismatch {p.shape} vs {q.shape}")
    if not np.all(np.isfinite(p)):
        raise ValidationError("loss argument has non-finite entries")
    return p, q


def _kl_domain(p, q):
    if np.any((p <= 0) & (q > 0)):
        raise ValidationError(
            "KL loss undefined where p = 0 < q; jitter the histograms"
        )


def _normalized_ot(loss: Loss, p, q):
    mass = p.sum(axis=-1, keepdims=True)
    state = sinkhorn_run(p / mass, q, loss.kernel, loss.inner_iters, tol=loss.inner_tol)
    return state, mass


def loss_value(loss: Loss, p, q) -> np.ndarray:
    p, q = _pair(p, q)
    kind = loss.kind
    if kind == "tv":
        return np.abs(p - q).sum(axis=-1)
    if kind == "quadratic":
        return ((p - q) ** 2).sum(axis=-1)
    if kind == "kl":
        _kl_domain(p, q)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(p > 0, p * np.log(p / q), 0.0)
        return (t - p + q).sum(axis=-1)
    # Wasserstein: entropic OT from p / |p| to q, so the loss is defined
    # for the unnormalized barycenters produced at finite iteration counts.
    state, _ = _normalized_ot(loss, p, q)
    return plan_value(state, loss.kernel)


def loss_grad(loss: Loss, p, q) -> np.ndarray:
    p, q = _pair(p, q)
    kind = loss.kind
    if kind == "tv":
        return np.sign(p - q)
    if kind == "quadratic":
        return 2.0 * (p - q)
    if kind == "kl":
        _kl_domain(p, q)
        g = np.log(p / q)
        return g - 1.0 if loss.kl_printed_gradient else g
    state, mass = _normalized_ot(loss, p, q)
    f = loss.kernel.gamma * np.log(state.b)
    # chain rule through p -> p / |p|; the potential's free constant drops out
    return (f - np.sum(f * p, axis=-1, keepdims=True) / mass) / mass

