"""Figures written next to the CSV reports (Agg backend, no display needed)."""
from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .serialize import atomic_write_bytes  # noqa: E402

# PNG metadata is pinned so that identical data gives identical bytes.
_META = {"Software": None}


def _save(fig, path) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata=_META)
    plt.close(fig)
    path = Path(path)
    atomic_write_bytes(path, buf.getvalue())
    return path


def plot_training(rows: list, path) -> Path:
    """Loss and accuracy per epoch."""
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
    epochs = [r["epoch"] for r in rows]
    a.plot(epochs, [r["train_loss"] for r in rows], marker="o")
    a.set_xlabel("epoch")
    a.set_ylabel("train loss")
    b.plot(epochs, [r["train_acc"] for r in rows], marker="o", label="train")
    b.plot(epochs, [r["test_acc"] for r in rows], marker="s", label="test")
    b.set_xlabel("epoch")
    b.set_ylabel("accuracy")
    b.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_deltas(series: dict, path, x_key: str = "epoch", x_label: str = "epoch") -> Path:
    """Delta1 and Delta2 curves, one line per named series of rows."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    for name, rows in series.items():
        xs = [r[x_key] for r in rows]
        for ax, key in zip(axes, ("delta1", "delta2")):
            ax.plot(xs, [r[key] for r in rows], marker="o", label=str(name))
    for ax, key in zip(axes, ("Delta1", "Delta2")):
        ax.set_xlabel(x_label)
        ax.set_ylabel(key)
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_per_shift(rates, shifts, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(range(len(rates)), rates)
    ax.set_xticks(range(len(rates)))
    ax.set_xticklabels([f"{sx},{sy}" for sx, sy in shifts], fontsize=7)
    ax.set_xlabel("shift (x, y)")
    ax.set_ylabel("change rate")
    fig.tight_layout()
    return _save(fig, path)


def plot_margins(empirical, theoretical, path) -> Path:
    """Empirical feature change against its certificate; points must sit below the diagonal."""
    empirical = np.asarray(empirical, float)
    theoretical = np.asarray(theoretical, float)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.loglog(np.maximum(theoretical, 1e-300), np.maximum(empirical, 1e-300), ".", ms=3)
    positive = theoretical[theoretical > 0]
    if positive.size:
        lo, hi = positive.min(), positive.max()
        ax.plot([lo, hi], [lo, hi], "k--", lw=1)
    ax.set_xlabel("bound * |s|")
    ax.set_ylabel("|F(T_s I) - F(I)|")
    fig.tight_layout()
    return _save(fig, path)


def plot_basis(planes, names, path) -> Path:
    fig, axes = plt.subplots(1, len(planes), figsize=(2 * len(planes), 2.2))
    for ax, plane, name in zip(np.atleast_1d(axes), planes, names):
        ax.imshow(plane, cmap="RdBu_r")
        ax.set_title(name, fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, path)


def plot_grouped_bars(summary: dict, keys, path) -> Path:
    """One group of bars per key, one bar per named entry of ``summary``."""
    names = list(summary)
    fig, ax = plt.subplots(figsize=(5, 3))
    width = 0.8 / max(len(names), 1)
    for i, name in enumerate(names):
        ax.bar(np.arange(len(keys)) + i * width, [summary[name][k] for k in keys], width, label=name)
    ax.set_xticks(np.arange(len(keys)) + 0.4 - width / 2)
    ax.set_xticklabels(keys)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
