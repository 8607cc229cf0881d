"""Delimited and rendered outputs: cost tables, training curves, overlays.

Every writer takes explicit paths and writes both machine-readable CSV and
PNG figures rendered off-screen, so commands can drop a complete report
next to their data without a display server.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .costmodel import CostReport
from .tensor import ClipTensor
from .training import EpochStats

SECTION_ORDER = ("encoder", "pyramid", "decoder", "head")


# ---------------------------------------------------------------------------
# cost reports


def write_cost_summary_csv(reports: dict[str, CostReport], path: str | Path) -> None:
    """One row per realization, with the work ratio against "standard"."""
    base = reports.get("standard")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["variant", "multiply_adds", "ops", "params", "activation_bytes",
             "ops_ratio_to_standard"]
        )
        for variant, rep in reports.items():
            ratio = rep.ops / base.ops if base is not None and base.ops else float("nan")
            writer.writerow(
                [variant, rep.multiply_adds, rep.ops, rep.params,
                 rep.activation_bytes, f"{ratio:.6f}"]
            )


def write_cost_layers_csv(reports: dict[str, CostReport], path: str | Path) -> None:
    """One row per (realization, layer)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["variant", "layer", "section", "kind", "realization",
             "multiply_adds", "ops", "params", "activation_bytes"]
        )
        for variant, rep in reports.items():
            for layer in rep.layers:
                writer.writerow(
                    [variant, layer.name, layer.section, layer.kind,
                     layer.variant or "", layer.macs, layer.ops, layer.params,
                     layer.activation_bytes]
                )


def write_cost_figure(reports: dict[str, CostReport], path: str | Path) -> None:
    """Grouped bars: operations per section for each realization."""
    variants = list(reports)
    sections = [
        s for s in SECTION_ORDER
        if any(layer.section == s for rep in reports.values() for layer in rep.layers)
    ]
    fig, ax = plt.subplots(figsize=(7.2, 4.2))
    width = 0.8 / max(1, len(variants))
    xs = np.arange(len(sections))
    for i, variant in enumerate(variants):
        totals = [
            sum(layer.ops for layer in reports[variant].layers if layer.section == s)
            for s in sections
        ]
        ax.bar(xs + i * width, totals, width=width, label=variant)
    ax.set_xticks(xs + width * (len(variants) - 1) / 2)
    ax.set_xticklabels(sections)
    ax.set_yscale("log")
    ax.set_ylabel("operations (multiplies + adds)")
    ax.set_title("work by section and realization")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


# ---------------------------------------------------------------------------
# training reports


def write_train_log_csv(history: list[EpochStats], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch", "learning_rate", "train_loss", "eval_loss",
             "accuracy", "foreground_iou", "seconds"]
        )
        for e in history:
            writer.writerow(
                [e.epoch, f"{e.learning_rate:.8e}", f"{e.train_loss:.8f}",
                 f"{e.eval_loss:.8f}", f"{e.accuracy:.6f}", f"{e.iou:.6f}",
                 f"{e.seconds:.3f}"]
            )


def write_loss_curve(history: list[EpochStats], path: str | Path) -> None:
    epochs = [e.epoch for e in history]
    fig, ax = plt.subplots(figsize=(7.2, 4.2))
    ax.plot(epochs, [e.train_loss for e in history], label="train loss")
    ax.plot(epochs, [e.eval_loss for e in history], label="eval loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy")
    twin = ax.twinx()
    twin.plot(epochs, [e.accuracy for e in history], color="tab:green",
              linestyle="--", label="accuracy")
    twin.plot(epochs, [e.iou for e in history], color="tab:red",
              linestyle="--", label="foreground IoU")
    twin.set_ylabel("accuracy / IoU")
    twin.set_ylim(0.0, 1.05)
    lines = ax.get_lines() + twin.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], loc="center right")
    ax.set_title("training progress")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


# ---------------------------------------------------------------------------
# clip and mask rendering


def _to_rgb(frame: np.ndarray) -> np.ndarray:
    """Map an (h, w, c) float frame to display RGB in [0, 1]."""
    lo = float(frame.min())
    hi = float(frame.max())
    scaled = (frame - lo) / (hi - lo) if hi > lo else np.zeros_like(frame)
    if scaled.shape[-1] >= 3:
        return scaled[..., :3]
    return np.repeat(scaled[..., :1], 3, axis=-1)


def write_clip_montage(
    clip: ClipTensor,
    mask: np.ndarray | None,
    path: str | Path,
    max_frames: int = 8,
    title: str | None = None,
) -> None:
    """One panel per frame, with the mask overlaid in red when given."""
    arr = clip.data
    if arr.ndim == 5:
        arr = arr[0]
    t = arr.shape[2]
    count = min(t, max_frames)
    cols = min(count, 4)
    rows = -(-count // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(3.0 * cols, 3.0 * rows),
                             squeeze=False)
    for idx in range(rows * cols):
        ax = axes[idx // cols][idx % cols]
        ax.axis("off")
        if idx >= count:
            continue
        rgb = _to_rgb(arr[:, :, idx, :])
        if mask is not None:
            m = np.asarray(mask)[:, :, idx] != 0
            rgb = rgb.copy()
            rgb[m] = 0.55 * rgb[m] + 0.45 * np.array([1.0, 0.1, 0.1])
        ax.imshow(rgb, interpolation="nearest")
        ax.set_title(f"frame {idx}", fontsize=9)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


# ---------------------------------------------------------------------------
# benchmarks


def write_bench_csv(rows: list[dict], path: str | Path) -> None:
    """rows: dicts with variant, median_seconds, multiply_adds, macs_per_second."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "median_seconds", "multiply_adds", "macs_per_second"])
        for row in rows:
            writer.writerow(
                [row["variant"], f"{row['median_seconds']:.6f}",
                 row["multiply_adds"], f"{row['macs_per_second']:.3e}"]
            )


def write_bench_figure(rows: list[dict], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    names = [row["variant"] for row in rows]
    ax.bar(names, [row["median_seconds"] for row in rows], color="tab:blue")
    ax.set_ylabel("median forward seconds")
    ax.set_title("forward wall time by realization")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
