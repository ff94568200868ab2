"""Wasserstein dictionary learning by joint quasi-Newton descent on logits.

Atoms and weights are parameterized by softmax logits ``alpha`` (``S x N``)
and ``beta`` (``M x S``), so every iterate is feasible. The objective is
the sum over datapoints of the fitting loss between each datapoint and
its truncated barycenter reconstruction.
"""

from __future__ import annotations

import math
import time
import warnings
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np

from .barycenter import barycenter_forward, barycenter_generalized, barycenter_log_domain
from .core import InstabilityError, Kernel, ParameterError, ValidationError, softmax, softmax_vjp
from .grad import GradientPack, generalized_grads, log_sinkhorn_grads, sinkhorn_grads
from .losses import Loss

INITS = ("uniform-atoms", "random-atoms")


def parse_loss(spec: str):
    """Split ``"wasserstein:200"`` into ``("wasserstein", 200)``; the count is optional."""
    kind, _, inner = str(spec).partition(":")
    if inner:
        try:
            n = int(inner)
        except ValueError:
            raise ParameterError(f"bad inner iteration count in loss {spec!r}") from None
        return kind, n
    return kind, 100


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run.

    ``S`` is the number of atoms and ``L`` the number of Sinkhorn
    iterations per barycenter evaluation. ``zeta=None`` selects
    ``N / (100 M)`` once the data size is known.
    """

    S: int = 2
    L: int = 50
    gamma: float = 1.0
    loss: str = "quadratic"
    zeta: Optional[float] = None
    tau: float = 0.0
    rho: float = math.inf
    log_domain: bool = False
    warm_start: bool = False
    restart_every: int = 10
    max_outer_iters: int = 100
    lbfgs_memory: int = 10
    seed: int = 0
    init: str = "uniform-atoms"

    def __post_init__(self):
        if self.S < 2:
            raise ParameterError(f"S must be >= 2, got {self.S}")
        if self.L < 1:
            raise ParameterError(f"L must be >= 1, got {self.L}")
        if not self.gamma > 0:
            raise ParameterError(f"gamma must be positive, got {self.gamma}")
        if self.zeta is not None and not self.zeta > 0:
            raise ParameterError(f"zeta must be positive, got {self.zeta}")
        if self.tau > 0:
            raise ParameterError(f"tau must be <= 0, got {self.tau}")
        if not self.rho > 0:
            raise ParameterError(f"rho must be positive, got {self.rho}")
        if self.restart_every < 0 or self.max_outer_iters < 0 or self.lbfgs_memory < 1:
            raise ParameterError("restart_every, max_outer_iters must be >= 0 and lbfgs_memory >= 1")
        if self.init not in INITS:
            raise ParameterError(f"init must be one of {INITS}, got {self.init!r}")
        if self.log_domain and (self.tau != 0 or not math.isinf(self.rho)):
            raise ParameterError("the log-domain solver supports only tau=0, rho=inf")
        parse_loss(self.loss)

    @property
    def plain(self) -> bool:
        return self.tau == 0 and math.isinf(self.rho)

    def make_loss(self, kernel: Kernel) -> Loss:
        kind, inner = parse_loss(self.loss)
        return Loss(kind, kernel=kernel, inner_iters=inner)

    def zeta_for(self, n: int, m: int) -> float:
        return self.zeta if self.zeta is not None else n / (100.0 * m)


@dataclass
class HistoryRecord:
    outer_iter: int
    objective: float
    mean_recon_error: float
    seconds: float


@dataclass
class TrainState:
    alpha: np.ndarray
    beta: np.ndarray
    warm_b: Optional[np.ndarray] = None
    warm_key: Optional[tuple] = None
    history: List[HistoryRecord] = field(default_factory=list)

    @property
    def atoms(self) -> np.ndarray:
        return softmax(self.alpha)

    @property
    def weights(self) -> np.ndarray:
        return softmax(self.beta)


@dataclass
class Evaluation:
    value: float
    grad_alpha: np.ndarray
    grad_beta: np.ndarray
    pack: GradientPack


def _check_data(data, n: Optional[int] = None) -> np.ndarray:
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"data must be a 2-D array (one histogram per row), got {x.shape}")
    if n is not None and x.shape[1] != n:
        raise ValidationError(f"data rows have {x.shape[1]} bins, the grid has {n}")
    if not np.all(np.isfinite(x)) or np.any(x < 0):
        raise ValidationError("data must be finite and nonnegative")
    return x


def energy_and_grads(alpha, beta, data, kernel: Kernel, cfg: TrainConfig,
                     warm_b=None, loss: Optional[Loss] = None) -> Evaluation:
    """Objective and logit gradients for a whole dataset.

    ``data`` holds one histogram per row (``M x N``). Atom gradients are
    summed over datapoints in index order; weight gradients are scaled by
    ``zeta``. ``warm_b`` seeds the initial scalings (logs of them in
    log-domain mode) and is treated as a constant.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    x = _check_data(data, kernel.size)
    if alpha.shape != (cfg.S, kernel.size) or beta.shape != (x.shape[0], cfg.S):
        raise ValidationError(
            f"logit shapes {alpha.shape}, {beta.shape} do not match "
            f"S={cfg.S}, N={kernel.size}, M={x.shape[0]}"
        )
    loss = cfg.make_loss(kernel) if loss is None else loss
    atoms = softmax(alpha)
    weights = softmax(beta)
    if cfg.log_domain:
        pack = log_sinkhorn_grads(x, atoms, weights, kernel, cfg.L, loss.grad, log_b0=warm_b)
    elif cfg.plain:
        pack = sinkhorn_grads(x, atoms, weights, kernel, cfg.L, loss.grad, b0=warm_b)
    else:
        pack = generalized_grads(x, atoms, weights, kernel, cfg.L, loss.grad,
                                 tau=cfg.tau, rho=cfg.rho, b0=warm_b)
    value = float(np.sum(loss.value(pack.barycenter, x)))
    bad = ~(np.isfinite(pack.grad_atoms).all(axis=(1, 2)) & np.isfinite(pack.grad_weights).all(axis=1))
    if bad.any() or not np.isfinite(value):
        raise InstabilityError("backward pass", cfg.L, np.nonzero(bad)[0])
    grad_atoms = np.zeros_like(atoms)
    for i in range(x.shape[0]):
        grad_atoms += pack.grad_atoms[i]
    ga = softmax_vjp(alpha, grad_atoms)
    gb = cfg.zeta_for(kernel.size, x.shape[0]) * softmax_vjp(beta, pack.grad_weights)
    return Evaluation(value, ga, gb, pack)


def reconstruct(atoms, weights, kernel: Kernel, cfg: TrainConfig, b0=None) -> np.ndarray:
    """Barycenter of ``atoms`` with ``weights`` using the configured solver."""
    if cfg.log_domain:
        return barycenter_log_domain(atoms, weights, kernel, cfg.L, log_b0=b0).P
    if cfg.plain:
        return barycenter_forward(atoms, weights, kernel, cfg.L, b0=b0).P
    return barycenter_generalized(atoms, weights, kernel, cfg.L, tau=cfg.tau,
                                  rho=cfg.rho, b0=b0).P


# ---------------------------------------------------------------------------
# limited-memory BFGS
# ---------------------------------------------------------------------------


@dataclass
class LBFGSResult:
    x: np.ndarray
    f: float
    aux: object
    n_iter: int
    message: str


def two_loop(g, s_list, y_list) -> np.ndarray:
    """Apply the L-BFGS inverse-Hessian approximation to ``g``."""
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_list), reversed(y_list)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    if s_list:
        s, y = s_list[-1], y_list[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), (rho, a) in zip(zip(s_list, y_list), reversed(alphas)):
        q += (a - rho * (y @ q)) * s
    return q


def minimize_lbfgs(fg: Callable, x0, memory: int = 10, max_iter: int = 100,
                   restart_every: int = 0, gtol: float = 1e-12, c1: float = 1e-4,
                   max_trials: int = 30, on_accept: Optional[Callable] = None,
                   callback: Optional[Callable] = None) -> LBFGSResult:
    """Minimize with two-loop L-BFGS and halving Armijo backtracking.

    ``fg(x)`` returns ``(f, g, aux)``. ``on_accept(x, aux)`` runs after each
    accepted step; when the objective itself has changed it returns the
    new ``(f, g, aux)`` at ``x``, otherwise None. The curvature memory
    is cleared every ``restart_every`` iterations (0 disables that) and
    whenever a line search fails; a second consecutive failure stops the
    run. The best point seen is returned.
    """
    x = np.array(x0, dtype=np.float64)
    f, g, aux = fg(x)
    if not np.isfinite(f):
        raise ValidationError("objective is not finite at the starting point")
    s_list: deque = deque(maxlen=memory)
    y_list: deque = deque(maxlen=memory)
    best_f, best_x, best_aux = f, x.copy(), aux
    message = "max_iter reached"
    it = 0
    failed_once = False
    while it < max_iter:
        if np.max(np.abs(g)) <= gtol:
            message = "gradient below tolerance"
            break
        if restart_every and it > 0 and it % restart_every == 0:
            s_list.clear()
            y_list.clear()
        d = -two_loop(g, list(s_list), list(y_list))
        slope = g @ d
        if not slope < 0:
            s_list.clear()
            y_list.clear()
            d = -g
            slope = g @ d
        t = 1.0 if s_list else min(1.0, 1.0 / np.max(np.abs(g)))
        accepted = None
        for _ in range(max_trials):
            xn = x + t * d
            try:
                fn, gn, auxn = fg(xn)
            except InstabilityError:
                fn = math.inf
            if np.isfinite(fn) and fn <= f + c1 * t * slope:
                accepted = (xn, fn, gn, auxn)
                break
            t *= 0.5
        if accepted is None:
            if failed_once or not s_list:
                message = "line search failed"
                warnings.warn("line search failed after a curvature restart; "
                              "returning the best point seen", RuntimeWarning, stacklevel=2)
                break
            failed_once = True
            s_list.clear()
            y_list.clear()
            continue
        failed_once = False
        xn, fn, gn, auxn = accepted
        s, y = xn - x, gn - g
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            s_list.append(s)
            y_list.append(y)
        x, f, g, aux = xn, fn, gn, auxn
        it += 1
        if on_accept is not None:
            fresh = on_accept(x, aux)
            if fresh is not None:
                f, g, aux = fresh
        if f < best_f:
            best_f, best_x, best_aux = f, x.copy(), aux
        if callback is not None:
            callback(it, f, aux)
    return LBFGSResult(x=best_x, f=best_f, aux=best_aux, n_iter=it, message=message)


# ---------------------------------------------------------------------------
# training driver
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    atoms: np.ndarray
    weights: np.ndarray
    objective: float
    history: List[HistoryRecord]
    state: TrainState
    reconstructions: np.ndarray
    message: str = ""


def init_state(cfg: TrainConfig, n: int, m: int) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    beta = rng.standard_normal((m, cfg.S))
    if cfg.init == "uniform-atoms":
        alpha = np.zeros((cfg.S, n))
    else:
        alpha = rng.standard_normal((cfg.S, n))
    return TrainState(alpha=alpha, beta=beta)


def train(data, kernel: Kernel, cfg: TrainConfig,
          state: Optional[TrainState] = None) -> TrainResult:
    """Learn ``S`` atoms and per-datapoint weights for ``data`` (``M x N``)."""
    x = _check_data(data, kernel.size)
    m, n = x.shape
    if state is None:
        state = init_state(cfg, n, m)
    loss = cfg.make_loss(kernel)
    sa = cfg.S * n
    key = (cfg.S, cfg.gamma, cfg.L)
    if state.warm_key != key:
        state.warm_b, state.warm_key = None, key

    def split(v):
        return v[:sa].reshape(cfg.S, n), v[sa:].reshape(m, cfg.S)

    def fg(v):
        a, b = split(v)
        ev = energy_and_grads(a, b, x, kernel, cfg, warm_b=state.warm_b, loss=loss)
        return ev.value, np.concatenate([ev.grad_alpha.ravel(), ev.grad_beta.ravel()]), ev

    def on_accept(v, ev):
        if not cfg.warm_start:
            return None
        state.warm_b = ev.pack.trace.final_b.copy()
        try:
            return fg(v)
        except InstabilityError:
            # chained scalings left floating-point range; start over cold
            state.warm_b = None
            return fg(v)

    start = time.perf_counter()

    def record(it, f, ev):
        err = float(np.mean(np.sum((ev.pack.barycenter - x) ** 2, axis=-1)))
        state.history.append(HistoryRecord(it, float(f), err, time.perf_counter() - start))

    v0 = np.concatenate([state.alpha.ravel(), state.beta.ravel()])
    f0, _, ev0 = fg(v0)
    record(0, f0, ev0)
    res = minimize_lbfgs(fg, v0, memory=cfg.lbfgs_memory, max_iter=cfg.max_outer_iters,
                         restart_every=cfg.restart_every, on_accept=on_accept,
                         callback=record)
    state.alpha, state.beta = split(res.x)
    atoms, weights = state.atoms, state.weights
    assert np.allclose(atoms.sum(-1), 1.0) and np.allclose(weights.sum(-1), 1.0)
    return TrainResult(atoms=atoms, weights=weights, objective=float(res.f),
                       history=state.history, state=state,
                       reconstructions=res.aux.pack.barycenter, message=res.message)


def train_best_of(data, kernel: Kernel, cfg: TrainConfig, seeds) -> TrainResult:
    """Run :func:`train` once per seed and keep the lowest final objective."""
    best = None
    for seed in seeds:
        res = train(data, kernel, replace(cfg, seed=int(seed)))
        if best is None or res.objective < best.objective:
            best = res
    if best is None:
        raise ParameterError("need at least one seed")
    return best
