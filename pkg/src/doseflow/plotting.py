"""Figures written next to the CSV outputs (Agg backend, files only)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(result, path, title: str = ""):
    """Relative MISE against gamma; gamma = 0 is drawn as the reference line."""
    g = np.asarray(result.gammas)
    rel = np.asarray(result.relative)
    pos = g > 0
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogx(g[pos], rel[pos], "o-", ms=3, label="HSIC penalty")
    ax.axhline(1.0, color="k", lw=0.8, ls="--", label="gamma = 0")
    ax.set_xlabel("gamma")
    ax.set_ylabel("MISE relative to gamma = 0")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    _save(fig, path)


def plot_table(rows, path):
    """Bar chart of mean sqrt-MISE and sqrt-AMSE with one-std error bars."""
    rows = [r for r in rows if np.isfinite(r.mean_sqrt_mise)]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(rows) + 1), 3.5))
    ax.bar(x - 0.2, [r.mean_sqrt_mise for r in rows], 0.4, yerr=[r.std_sqrt_mise for r in rows],
           capsize=2, label="sqrt MISE")
    ax.bar(x + 0.2, [r.mean_sqrt_amse for r in rows], 0.4, yerr=[r.std_sqrt_amse for r in rows],
           capsize=2, label="sqrt AMSE")
    ax.set_xticks(x)
    ax.set_xticklabels([r.method for r in rows], rotation=30, ha="right")
    ax.legend(frameon=False)
    _save(fig, path)


def plot_curves(result, path):
    """Training objective and validation MSE per epoch, best epoch marked."""
    ep = np.arange(1, len(result.train_curve) + 1)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ep, result.train_curve, label="train objective")
    ax.plot(ep, result.val_curve, label="validation MSE")
    ax.axvline(result.best_epoch, color="k", lw=0.8, ls=":")
    ax.set_xlabel("epoch")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    _save(fig, path)


def plot_dose_response(predict, X, oracle, path, grid=None, w: int = 0):
    """Population-average estimated and true dose-response curves."""
    grid = np.linspace(0.01, 0.99, 65) if grid is None else np.asarray(grid)
    X = np.asarray(X, dtype=float)
    n = len(X)
    est, truth = [], []
    for s in grid:
        sv = np.full(n, s)
        wv = np.full(n, w, dtype=int)
        est.append(np.mean(predict(X, sv, wv)))
        truth.append(np.mean(oracle(X, sv, wv)))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(grid, truth, "k-", label="true")
    ax.plot(grid, est, "--", label="estimated")
    ax.set_xlabel("dosage")
    ax.set_ylabel("average outcome")
    ax.legend(frameon=False)
    _save(fig, path)
