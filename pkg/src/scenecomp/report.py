"""Metrics records and figure rendering for run directories.

Metrics are line-delimited key-value records, one line per step, with a
stable key order fixed by the first record; that keeps files diffable and
lets determinism tests compare runs textually. Image grids are rendered
with matplotlib to PNG files alongside the metrics.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch
from torch import Tensor


class MetricsWriter:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.keys: list[str] | None = None
        self.path.write_text("")

    def write(self, record: dict) -> None:
        if self.keys is None:
            self.keys = list(record.keys())
        missing = [k for k in self.keys if k not in record]
        if missing:
            raise ValueError(f"record missing keys {missing}")
        line = " ".join(f"{k}={_fmt(record[k])}" for k in self.keys)
        with self.path.open("a") as fh:
            fh.write(line + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.8g}"
    return str(v)


def read_metrics(path: str | Path) -> list[dict]:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = {}
        for part in line.split():
            key, _, raw = part.partition("=")
            try:
                rec[key] = int(raw)
            except ValueError:
                try:
                    rec[key] = float(raw)
                except ValueError:
                    rec[key] = raw
        records.append(rec)
    return records


def _to_display(img: Tensor) -> np.ndarray:
    arr = img.detach().cpu().float().numpy()
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
        return np.clip((arr + 1.0) * 0.5, 0.0, 1.0)
    return arr  # label map / mask, shown with a colormap


def save_image_grid(rows: list[tuple[str, list[Tensor]]], path: str | Path) -> None:
    """Render labeled rows of images to one PNG figure.

    rows: [(row_title, [img, img, ...]), ...]; images are (3, H, W) in
    [-1, 1] or (H, W) masks/label maps.
    """
    n_rows = len(rows)
    n_cols = max(len(imgs) for _, imgs in rows)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(1.6 * n_cols, 1.8 * n_rows), squeeze=False)
    for r, (title, imgs) in enumerate(rows):
        for c in range(n_cols):
            ax = axes[r][c]
            ax.set_axis_off()
            if c < len(imgs):
                disp = _to_display(imgs[c])
                if disp.ndim == 2:
                    ax.imshow(disp, cmap="viridis", interpolation="nearest")
                else:
                    ax.imshow(disp, interpolation="nearest")
            if c == 0:
                ax.set_title(title, fontsize=8, loc="left")
    fig.tight_layout(pad=0.3)
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_loss_curves(metrics: list[dict], keys: list[str], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [m.get("step", i) for i, m in enumerate(metrics)]
    for key in keys:
        vals = [m[key] for m in metrics if key in m]
        if vals:
            ax.plot(steps[: len(vals)], vals, label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
