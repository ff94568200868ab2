"""PNG figures for CLI runs, drawn with matplotlib's file-only backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _show(ax, h, dims, **kw):
    if len(dims) == 1:
        ax.plot(np.arange(dims[0]), h, **kw)
    else:
        ax.imshow(np.reshape(h, dims[:2]), cmap="gray_r")
        ax.set_xticks([])
        ax.set_yticks([])


def plot_atoms(atoms, dims, path) -> None:
    s = len(atoms)
    fig, axes = plt.subplots(1, s, figsize=(3 * s, 2.6), squeeze=False)
    for i, (ax, d) in enumerate(zip(axes[0], atoms)):
        _show(ax, d, dims)
        ax.set_title(f"atom {i}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_reconstructions(data, recon, dims, path, max_items: int = 8) -> None:
    m = min(len(data), max_items)
    rows = 1 if len(dims) == 1 else 2
    fig, axes = plt.subplots(rows, m, figsize=(2.6 * m, 2.4 * rows), squeeze=False)
    for i in range(m):
        if rows == 1:
            ax = axes[0, i]
            ax.plot(data[i], label="data")
            ax.plot(recon[i], label="reconstruction")
            if i == 0:
                ax.legend(fontsize=7)
        else:
            _show(axes[0, i], data[i], dims)
            _show(axes[1, i], recon[i], dims)
        axes[0, i].set_title(f"#{i}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_history(history, path) -> None:
    it = [h.outer_iter for h in history]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.semilogy(it, [max(h.objective, 1e-300) for h in history])
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("objective")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_sweep(barycenters, lattice, dims, path) -> None:
    """Triangular layout of barycenters indexed by integer lattice points ``(i, j, k)``."""
    k = int(np.sum(lattice[0]))
    fig, axes = plt.subplots(k + 1, k + 1, figsize=(1.8 * (k + 1), 1.6 * (k + 1)),
                             squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for h, (i, j, _) in zip(barycenters, lattice):
        ax = axes[k - i, j]
        ax.axis("on")
        _show(ax, h, dims)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
