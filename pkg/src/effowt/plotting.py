"""Figure rendering. Uses the Agg backend and strips volatile PNG metadata so
reruns produce identical files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    fig.savefig(tmp, format="png", dpi=100, metadata=_META)
    plt.close(fig)
    tmp.replace(path)
    return path


def plot_loss_curve(losses, path, title: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(np.arange(1, len(losses) + 1), losses, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_strategy_bars(names, values, path, ylabel: str, title: str, log: bool = False) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    values = np.asarray(values, dtype=np.float64)
    bars = ax.bar(names, values, color="#4c72b0")
    for b, v in zip(bars, values):
        ax.annotate(f"{v:.3g}", (b.get_x() + b.get_width() / 2, v), ha="center", va="bottom", fontsize=8)
    if log:
        ax.set_yscale("log")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_owta_alpha(alphas, det_re, ass_acc, owta, path, title: str = "OWTA vs alpha") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(alphas, det_re, label="D.Re")
    ax.plot(alphas, ass_acc, label="A.Acc")
    ax.plot(alphas, owta, label="OWTA", lw=2)
    ax.set_xlabel("alpha")
    ax.set_ylim(0, 1.02)
    ax.legend()
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)
