"""Report artifacts: delimited tables, metrics JSON, and matplotlib figures.

Every evaluation or sweep writes its numbers as CSV/JSON and, where a figure
makes the trend readable (loss curves, alpha sweeps, duration sweeps), an
accompanying PNG next to the delimited output.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image


def write_csv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    fieldnames = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def write_json(path: str | Path, payload: dict) -> None:
    """Deterministic JSON: sorted keys, fixed separators, trailing newline."""
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def write_score_matrix_csv(path: str | Path, matrix) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["gallery_subject\\probe_subject"] + list(matrix.probe_labels))
        for label, row in zip(matrix.gallery_labels, matrix.scores):
            writer.writerow([label] + [f"{v:.10g}" for v in row])


def save_loss_curves(path: str | Path, log_rows: list[dict]) -> None:
    """Training loss components over iterations."""
    iterations = [r["iteration"] for r in log_rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key in ("total", "xrecon", "pose_sim", "cano_cons", "id_inc_avg"):
        ax.plot(iterations, [r[key] for r in log_rows], label=key, linewidth=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_alpha_sweep_plot(path: str | Path, rows: list[dict], metric_name: str) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.plot([r["alpha"] for r in rows], [r["value"] for r in rows], marker="o")
    ax.set_xlabel("fusion weight on dynamic channel")
    ax.set_ylabel(metric_name)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_duration_sweep_plot(path: str | Path, rows: list[dict], metric_name: str) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    fractions = [r["fraction"] for r in rows]
    for channel, style in (("static", "s--"), ("dynamic", "^--"), ("fused", "o-")):
        ax.plot(fractions, [r[channel] for r in rows], style, label=channel)
    ax.set_xlabel("probe duration fraction")
    ax.set_ylabel(metric_name)
    ax.set_ylim(0, 1.02)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def frames_to_grid(rows_of_frames: list[list[np.ndarray]], separator: int = 2) -> np.ndarray:
    """Tile frames (each 64x32x3 in [0,1]) into one 8-bit image grid.

    Cells are laid out row-major with `separator`-pixel white gaps.
    """
    n_rows = len(rows_of_frames)
    n_cols = max(len(r) for r in rows_of_frames)
    fh, fw = rows_of_frames[0][0].shape[:2]
    height = n_rows * fh + (n_rows - 1) * separator
    width = n_cols * fw + (n_cols - 1) * separator
    canvas = np.full((height, width, 3), 255, dtype=np.uint8)
    for i, row in enumerate(rows_of_frames):
        for j, frame in enumerate(row):
            y = i * (fh + separator)
            x = j * (fw + separator)
            canvas[y : y + fh, x : x + fw] = np.clip(np.rint(frame * 255.0), 0, 255).astype(
                np.uint8
            )
    return canvas


def save_image_grid(path: str | Path, rows_of_frames: list[list[np.ndarray]]) -> None:
    Image.fromarray(frames_to_grid(rows_of_frames)).save(path)
