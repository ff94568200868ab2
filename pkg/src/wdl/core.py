"""Grids, costs, Gibbs kernels and simplex utilities.

All arrays are float64. Histograms are plain 1-D numpy arrays whose
trailing axis indexes the grid bins in C (row-major) order; functions that
act on histograms broadcast over any leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

DENSE_LIMIT = 4096
JITTER = 1e-9


class WDLError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(WDLError, ValueError):
    """Malformed input: wrong shape, negative mass, non-finite values."""


class ParameterError(ValidationError):
    """A hyperparameter outside its admissible range."""


class InstabilityError(WDLError, FloatingPointError):
    """A scaling iteration produced non-finite values."""

    def __init__(self, where: str, iteration: int, indices=()):
        self.where = where
        self.iteration = iteration
        self.indices = tuple(int(i) for i in indices)
        at = f" (datapoints {list(self.indices)})" if self.indices else ""
        super().__init__(
            f"non-finite scaling vector in {where} at iteration {iteration}{at}; "
            "use the log-domain solver or a larger gamma"
        )


def bad_rows(arr) -> tuple:
    """Leading-axis indices of a (M, S, N) array holding non-finite values."""
    arr = np.asarray(arr)
    if arr.ndim < 3:
        return ()
    ok = np.isfinite(arr).reshape(arr.shape[0], -1).all(axis=1)
    return tuple(np.nonzero(~ok)[0])


# ---------------------------------------------------------------------------
# grids and costs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Grid:
    """Regular grid with cell centers at integer multiples of ``spacing``."""

    dims: Tuple[int, ...]
    spacing: Tuple[float, ...] = ()

    def __post_init__(self):
        dims = tuple(int(n) for n in np.atleast_1d(self.dims))
        if not dims or any(n < 1 for n in dims):
            raise ValidationError(f"grid axis lengths must be >= 1, got {dims}")
        spacing = self.spacing
        if spacing == () or spacing is None:
            spacing = (1.0,) * len(dims)
        spacing = tuple(float(h) for h in np.broadcast_to(spacing, (len(dims),)))
        if any(not h > 0 for h in spacing):
            raise ValidationError(f"grid spacing must be positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def ndim(self) -> int:
        return len(self.dims)

    def coordinates(self) -> np.ndarray:
        """Bin centers, shape (N, ndim)."""
        axes = [np.arange(n) * h for n, h in zip(self.dims, self.spacing)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Either the squared Euclidean cost on ``grid`` or an explicit matrix."""

    grid: Grid
    kind: str = "sqeuclidean"
    matrix: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("sqeuclidean", "explicit"):
            raise ValidationError(f"unknown cost kind {self.kind!r}")
        if self.kind == "explicit":
            if self.matrix is None:
                raise ValidationError("explicit cost requires a matrix")
            m = np.asarray(self.matrix, dtype=np.float64)
            n = self.grid.size
            if m.shape != (n, n):
                raise ValidationError(f"cost matrix must be {n}x{n}, got {m.shape}")
            if not np.all(np.isfinite(m)) or np.any(m < 0):
                raise ValidationError("cost matrix must be finite and nonnegative")
            if np.any(np.diag(m) != 0):
                raise ValidationError("cost matrix must have a zero diagonal")
            object.__setattr__(self, "matrix", m)

    @property
    def separable(self) -> bool:
        return self.kind == "sqeuclidean"

    def axis_costs(self) -> list:
        """Per-axis 1-D squared distances; only for separable costs."""
        if not self.separable:
            raise ValidationError("explicit cost matrices are not separable")
        out = []
        for n, h in zip(self.grid.dims, self.grid.spacing):
            x = np.arange(n) * h
            out.append((x[:, None] - x[None, :]) ** 2)
        return out


def build_cost(spec: CostSpec) -> np.ndarray:
    """Dense N x N cost matrix."""
    if spec.kind == "explicit":
        return spec.matrix.copy()
    x = spec.grid.coordinates()
    diff = x[:, None, :] - x[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def sqeuclidean_cost(dims, spacing=()) -> CostSpec:
    return CostSpec(Grid(tuple(np.atleast_1d(dims)), spacing))


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def signed_logsumexp(x, sign=None, axis=-1):
    """log|sum(sign * exp(x))| along ``axis`` with max shifting.

    Returns ``(value, sign)`` when ``sign`` is given, else ``value``. Slices
    that are entirely ``-inf`` give ``-inf`` (and sign 0).
    """
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    if sign is not None:
        e = e * sign
    s = np.sum(e, axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out = np.log(np.abs(s)) + m
    out = np.squeeze(out, axis=axis)
    if sign is None:
        return out
    return out, np.squeeze(np.sign(s), axis=axis)


def _apply_axis(mat: np.ndarray, v: np.ndarray, axis: int) -> np.ndarray:
    v = np.moveaxis(v, axis, -1)
    return np.moveaxis(v @ mat.T, -1, axis)


def _log_apply_axis(logmat, v, axis, sign=None):
    v = np.moveaxis(v, axis, -1)[..., None, :]
    terms = logmat + v
    if sign is None:
        out = signed_logsumexp(terms)
        return np.moveaxis(out, -1, axis)
    s = np.moveaxis(sign, axis, -1)[..., None, :]
    out, sg = signed_logsumexp(terms, np.broadcast_to(s, terms.shape))
    return np.moveaxis(out, -1, axis), np.moveaxis(sg, -1, axis)


# Below this a shifted matrix product may have lost terms to underflow,
# so those entries are recomputed by an exact log-sum-exp.
_FAST_FLOOR = 1e-200


def log_matvec(mat, logmat, v, sign=None):
    """log|mat @ (sign * exp(v))| along the last axis of ``v``.

    ``mat`` must equal ``exp(logmat)``. Each input vector is shifted by its
    maximum and pushed through an ordinary product; output entries whose
    shifted sum falls under ``1e-200`` (where underflowed kernel entries
    could matter) are redone with :func:`signed_logsumexp`. Returns
    ``(value, sign)`` when ``sign`` is given.
    """
    v = np.asarray(v, dtype=np.float64)
    m = np.max(v, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(v - m)
    with np.errstate(divide="ignore", invalid="ignore"):
        if sign is None:
            tot = e @ mat.T
            out = np.log(tot) + m
            bad = ~(tot >= _FAST_FLOOR)
        else:
            sign = np.broadcast_to(sign, v.shape)
            pos = np.where(sign > 0, e, 0.0) @ mat.T
            neg = np.where(sign < 0, e, 0.0) @ mat.T
            tot = pos - neg
            out = np.log(np.abs(tot)) + m
            sg = np.sign(tot)
            bad = ~(np.maximum(pos, neg) >= _FAST_FLOOR)
    if bad.any():
        idx = np.nonzero(bad)
        rows = v[idx[:-1]] if v.ndim > 1 else np.broadcast_to(v, (idx[0].size, v.size))
        terms = logmat[idx[-1]] + rows
        if sign is None:
            out[idx] = signed_logsumexp(terms)
        else:
            srows = sign[idx[:-1]] if v.ndim > 1 else np.broadcast_to(sign, terms.shape)
            out[idx], sg[idx] = signed_logsumexp(terms, srows)
    return out if sign is None else (out, sg)


def _log_matvec_axis(mat, logmat, v, axis, sign=None):
    v = np.moveaxis(v, axis, -1)
    if sign is None:
        return np.moveaxis(log_matvec(mat, logmat, v), -1, axis)
    out, sg = log_matvec(mat, logmat, v, np.moveaxis(sign, axis, -1))
    return np.moveaxis(out, -1, axis), np.moveaxis(sg, -1, axis)


@dataclass(frozen=True, eq=False)
class Kernel:
    """Gibbs kernel exp(-C / gamma), stored dense or as per-axis factors.

    Only the log of the kernel (``-C / gamma``) is kept for log-domain
    work, so entries that underflow in ``dense`` stay usable there.
    """

    gamma: float
    cost: CostSpec
    dense: Optional[np.ndarray] = None
    factors: Optional[Tuple[np.ndarray, ...]] = None
    log_dense: Optional[np.ndarray] = None
    log_factors: Optional[Tuple[np.ndarray, ...]] = None
    _dense_cache: dict = field(default_factory=dict, repr=False)

    @property
    def grid(self) -> Grid:
        return self.cost.grid

    @property
    def size(self) -> int:
        return self.grid.size

    @property
    def separable(self) -> bool:
        return self.factors is not None

    def matrix(self) -> np.ndarray:
        """Dense N x N kernel (materialized from factors if needed)."""
        if self.dense is not None:
            return self.dense
        if "m" not in self._dense_cache:
            if self.size > DENSE_LIMIT:
                raise ValidationError(
                    f"refusing to materialize a {self.size}x{self.size} kernel"
                )
            m = np.ones((1, 1))
            for f in self.factors:
                m = np.kron(m, f)
            self._dense_cache["m"] = m
        return self._dense_cache["m"]

    def log_matrix(self) -> np.ndarray:
        if self.log_dense is not None:
            return self.log_dense
        if "log" not in self._dense_cache:
            m = np.zeros((1, 1))
            for f in self.log_factors:
                m = (m[:, None, :, None] + f[None, :, None, :]).reshape(
                    m.shape[0] * f.shape[0], -1
                )
            self._dense_cache["log"] = m
        return self._dense_cache["log"]

    def _check(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1:] != (self.size,):
            raise ValidationError(
                f"vector length {v.shape[-1:]} does not match grid size {self.size}"
            )
        return v

    def apply(self, v, transpose: bool = False) -> np.ndarray:
        """K v (or K^T v), broadcasting over leading axes of ``v``."""
        v = self._check(v)
        if self.factors is None:
            return v @ self.dense if transpose else v @ self.dense.T
        if len(self.factors) == 1:
            f = self.factors[0]
            return v @ f if transpose else v @ f.T
        lead = v.shape[:-1]
        img = v.reshape(lead + self.grid.dims)
        for k, f in enumerate(self.factors):
            img = _apply_axis(f.T if transpose else f, img, len(lead) + k)
        return img.reshape(lead + (self.size,))

    def log_apply(self, logv, sign=None, transpose: bool = False):
        """log(K exp(logv)) by shifted log-sum-exp, axis by axis if separable.

        With ``sign`` the input is ``sign * exp(logv)`` and the result is
        returned as ``(log|K x|, sign(K x))``.
        """
        logv = self._check(logv)
        lead = logv.shape[:-1]
        if self.log_factors is None:
            mat = self.dense.T if transpose else self.dense
            lk = self.log_dense.T if transpose else self.log_dense
            return log_matvec(mat, lk, logv, sign)
        img = logv.reshape(lead + self.grid.dims)
        sg = None if sign is None else np.broadcast_to(sign, logv.shape).reshape(img.shape)
        for k, (f, lf) in enumerate(zip(self.factors, self.log_factors)):
            if transpose:
                f, lf = f.T, lf.T
            if sg is None:
                img = _log_matvec_axis(f, lf, img, len(lead) + k)
            else:
                img, sg = _log_matvec_axis(f, lf, img, len(lead) + k, sg)
        out = img.reshape(lead + (self.size,))
        if sg is None:
            return out
        return out, sg.reshape(lead + (self.size,))


def build_kernel(cost: CostSpec, gamma: float) -> Kernel:
    """Gibbs kernel; separable whenever the cost is squared Euclidean on the grid."""
    gamma = float(gamma)
    if not (gamma > 0 and np.isfinite(gamma)):
        raise ParameterError(f"gamma must be positive and finite, got {gamma}")
    if cost.separable:
        logs = tuple(-c / gamma for c in cost.axis_costs())
        return Kernel(gamma, cost, factors=tuple(np.exp(l) for l in logs),
                      log_factors=logs)
    if cost.grid.size > DENSE_LIMIT:
        raise ValidationError(
            f"dense kernels are limited to N <= {DENSE_LIMIT}; use a separable cost"
        )
    log_k = -build_cost(cost) / gamma
    return Kernel(gamma, cost, dense=np.exp(log_k), log_dense=log_k)


def apply_kernel(k: Kernel, v, transpose: bool = False) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0):
        raise ValidationError("kernel input must be nonnegative")
    if np.any(np.sum(v, axis=-1) == 0):
        raise ValidationError("kernel input must not be identically zero")
    return k.apply(v, transpose=transpose)


# ---------------------------------------------------------------------------
# simplex helpers
# ---------------------------------------------------------------------------


def make_histogram(values, jitter: float = 0.0, what: str = "histogram") -> np.ndarray:
    """Validate, optionally jitter, and normalize nonnegative mass to the simplex."""
    v = np.array(values, dtype=np.float64)
    if v.size == 0:
        raise ValidationError(f"{what} is empty")
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{what} has non-finite entries")
    if np.any(v < 0):
        raise ValidationError(f"{what} has negative entries")
    total = v.sum(axis=-1, keepdims=True)
    if np.any(total == 0):
        raise ValidationError(f"{what} has zero total mass")
    v = v / total
    if jitter:
        v = v + jitter
        v = v / v.sum(axis=-1, keepdims=True)
    return v


def is_simplex(v, tol: float = 1e-10) -> bool:
    v = np.asarray(v)
    return bool(np.all(v >= 0) and np.all(np.abs(v.sum(axis=-1) - 1) <= tol))


def softmax(logits, axis: int = -1) -> np.ndarray:
    u = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(u)):
        raise ValidationError("softmax logits must be finite")
    e = np.exp(u - u.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_vjp(logits, cotangent, axis: int = -1) -> np.ndarray:
    """(I - F 1^T) diag(F) applied to ``cotangent``, F = softmax(logits)."""
    u = np.asarray(logits, dtype=np.float64)
    c = np.asarray(cotangent, dtype=np.float64)
    if u.shape != c.shape:
        raise ValidationError(f"shape mismatch: logits {u.shape}, cotangent {c.shape}")
    f = softmax(u, axis=axis)
    fc = f * c
    return fc - f * fc.sum(axis=axis, keepdims=True)
