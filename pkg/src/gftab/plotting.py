"""Figures written next to the delimited reports (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import WinMatrix  # noqa: E402


def _slug(x: float) -> str:
    return f"{x:g}".replace(".", "p")


def win_matrix_figure(wm: WinMatrix, path: str | Path, title: str = "") -> Path:
    k = len(wm.methods)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.5 + 0.8 * k), max(3.5, 1.2 + 0.7 * k)))
    im = ax.imshow(wm.W, vmin=0.0, vmax=1.0, cmap="Blues")
    ax.set_xticks(range(k), wm.methods, rotation=45, ha="right")
    ax.set_yticks(range(k), wm.methods)
    for i in range(k):
        for j in range(k):
            v = wm.W[i, j]
            ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=8, color="white" if v > 0.6 else "black")
    ax.set_xlabel("opponent")
    ax.set_ylabel("method")
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def win_matrix_figures(wins: dict, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for (rho, eta), wm in wins.items():
        name = f"win_rho{_slug(rho)}_eta{_slug(eta)}.png"
        paths.append(win_matrix_figure(wm, out_dir / name, f"label_fraction={rho}\nnoise_fraction={eta}"))
    return paths


def history_figure(history: Sequence[dict], path: str | Path) -> Path:
    """Loss curves (left axis) and validation macro-F1 (right axis) per epoch."""
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("loss_total", "loss_sim", "loss_ce"):
        ax.plot(epochs, [h[key] for h in history], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax2 = ax.twinx()
    ax2.plot(epochs, [h["val_f1"] for h in history], color="black", ls="--", label="val_f1")
    ax2.set_ylabel("val macro-F1")
    ax2.set_ylim(0, 1)
    h1, l1 = ax.get_legend_handles_labels()
    h2, l2 = ax2.get_legend_handles_labels()
    ax.legend(h1 + h2, l1 + l2, fontsize=8, loc="center right")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
