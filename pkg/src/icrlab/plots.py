"""SVG figures: loss curves, layer-wise logits and the pass/fail matrix."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

ORIGIN = ("Origin-Linear", "Origin-ReLU", "Origin-Softmax")


def _curve(ax, traj, name, label):
    st = traj.steps
    y = traj.column(name)
    ok = ~np.isnan(y)
    if ok.any():
        ax.plot(st[ok], np.maximum(y[ok], 1e-300), label=label, lw=1.2)


def figure_losses(trajs: dict, path, noisy_alpha: float | None = None) -> None:
    """Six panels: population loss, Origin OOD loss and Reparam OOD loss (rows: noiseless, noisy)."""
    rows = [(0.0, "noiseless")]
    if noisy_alpha is not None:
        rows.append((noisy_alpha, f"noisy, alpha={noisy_alpha:g}"))
    fig, axes = plt.subplots(len(rows), 3, figsize=(15, 4.2 * len(rows)), squeeze=False)
    for r, (alpha, tag) in enumerate(rows):
        models = [m for (m, a) in trajs if a == alpha]
        for m in models:
            tr = trajs[(m, alpha)]
            _curve(axes[r, 0], tr, "loss_pop", m)
            _curve(axes[r, 1 if m in ORIGIN else 2], tr, "loss_ood", m)
        titles = ("population loss", "unseen-output loss (Origin)", "unseen-output loss (Reparam)")
        for c, title in enumerate(titles):
            ax = axes[r, c]
            ax.set_title(f"{title}, {tag}", fontsize=9)
            ax.set_xlabel("step")
            ax.set_yscale("log")
            if ax.lines:
                ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def figure_logits(traj, path, title: str = "") -> None:
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6))
    for ax, tag, name in ((axes[0], "xiA", "attention logits"), (axes[1], "xiF", "feed-forward logits")):
        for suffix in ("y", "tau", "maxother"):
            _plot_lin(ax, traj, f"{tag}_{suffix}", suffix)
        ax.set_title(f"{name} {title}".strip(), fontsize=9)
        ax.set_xlabel("step")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def _plot_lin(ax, traj, name, label):
    y = traj.column(name)
    ok = ~np.isnan(y)
    if ok.any():
        ax.plot(traj.steps[ok], y[ok], label=label, lw=1.2)


COLUMNS = ("noiseless 0-loss", "noiseless unseen y", "noisy Bayes-loss", "noisy unseen y")


def write_table(cells: dict, csv_path, svg_path=None) -> None:
    with Path(csv_path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", *COLUMNS])
        for m, row in cells.items():
            w.writerow([m, *("pass" if v else "fail" for v in row)])
    if svg_path is None:
        return
    models = list(cells)
    mat = np.array([[1.0 if v else 0.0 for v in cells[m]] for m in models])
    fig, ax = plt.subplots(figsize=(7, 0.45 * len(models) + 1.2))
    ax.imshow(mat, cmap="RdYlGn", vmin=0, vmax=1, aspect="auto")
    ax.set_xticks(range(len(COLUMNS)), COLUMNS, fontsize=8)
    ax.set_yticks(range(len(models)), models, fontsize=8)
    for i in range(len(models)):
        for j in range(len(COLUMNS)):
            ax.text(j, i, "pass" if mat[i, j] else "fail", ha="center", va="center", fontsize=7)
    fig.tight_layout()
    fig.savefig(svg_path, format="svg")
    plt.close(fig)
