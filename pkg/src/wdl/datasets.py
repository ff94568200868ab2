"""Synthetic 1-D histogram datasets used by the experiments and tests."""

from __future__ import annotations

import numpy as np

from .core import JITTER, ParameterError, make_histogram


def gaussian_bump(n: int, mean: float, sigma: float, support=None) -> np.ndarray:
    """Unnormalized Gaussian sampled at bins ``0..n-1``.

    ``support=(lo, hi)`` zeroes every bin outside ``[lo, hi)``.
    """
    t = np.arange(n, dtype=np.float64)
    g = np.exp(-0.5 * ((t - mean) / sigma) ** 2)
    if support is not None:
        lo, hi = support
        g[:lo] = 0.0
        g[hi:] = 0.0
    return g


def translated_gaussians(m: int = 5, n: int = 60, sigma: float = 3.0,
                         margin: float = 12.0, jitter: float = JITTER) -> np.ndarray:
    """``m`` copies of one Gaussian with means evenly spaced in ``[margin, n-1-margin]``.

    Returns an ``m x n`` array, one normalized histogram per row.
    """
    if m < 1 or n < 2:
        raise ParameterError("need m >= 1 and n >= 2")
    means = np.linspace(margin, n - 1 - margin, m)
    return np.stack([make_histogram(gaussian_bump(n, mu, sigma), jitter=jitter)
                     for mu in means])


def multimodal(m: int = 40, n: int = 60, sigma: float = 2.0, seed: int = 0,
               jitter: float = JITTER) -> np.ndarray:
    """Two-bump histograms living in the outer thirds of the grid.

    The grid is cut into three equal parts and the middle one stays
    empty. Each datapoint adds two Gaussians whose means are drawn
    uniformly from every other bin of the outer thirds, keeping ``sigma``
    clear of the middle part; each bump is truncated to its own third.
    When both draws coincide the datapoint has a single mode.
    """
    if n % 3:
        raise ParameterError(f"grid length must be divisible by 3, got {n}")
    third = n // 3
    pad = int(np.ceil(sigma))
    left = list(range(pad, third - pad, 2))
    right = list(range(2 * third + pad, n - pad, 2))
    if not left:
        raise ParameterError("sigma too large for the grid")
    positions = np.array(left + right)
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(m):
        h = np.zeros(n)
        for mu in rng.choice(positions, size=2, replace=True):
            part = (0, third) if mu < third else (2 * third, n)
            h += gaussian_bump(n, mu, sigma, support=part)
        rows.append(make_histogram(h, jitter=jitter))
    return np.stack(rows)


def middle_mass(hist) -> np.ndarray:
    """Fraction of each histogram's mass that lies in the middle third."""
    h = np.asarray(hist, dtype=np.float64)
    n = h.shape[-1]
    third = n // 3
    return h[..., third:n - third].sum(-1) / h.sum(-1)
