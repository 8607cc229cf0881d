"""Mask post-processing and evaluation metrics.

Connected-component labeling (two-pass with union-find), largest-region
selection, tight bounding boxes, mask IoU, and frame-level average
precision over scored box detections.

Conventions, fixed here once for the whole package:
  * masks are 2D (one frame); callers iterate the temporal axis
  * labels are assigned in raster-scan discovery order, starting at 1
  * bounding boxes are (top, left, bottom, right), all edges INCLUSIVE,
    so a box's pixel area is (bottom - top + 1) * (right - left + 1)
  * two empty masks have IoU 1.0 (an all-background prediction of an
    all-background truth is perfect, not undefined)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

Box = tuple[int, int, int, int]


@dataclass(frozen=True)
class Region:
    """One connected foreground region of a labeled mask."""

    label: int
    area: int
    bbox: Box


@dataclass(frozen=True)
class LabeledMask:
    """Integer label map (0 = background) plus its per-region table."""

    labels: np.ndarray
    regions: tuple[Region, ...]

    @property
    def num_regions(self) -> int:
        return len(self.regions)


def _as_binary_2d(mask: np.ndarray, name: str = "mask") -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2D, got rank {arr.ndim}")
    if arr.dtype != bool:
        vals = np.unique(arr)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError(f"{name} must be binary, found values {vals[:5]}")
        arr = arr != 0
    return arr


def connected_components(mask: np.ndarray, connectivity: int = 8) -> LabeledMask:
    """Label maximal connected foreground regions of one binary frame.

    Classic two-pass algorithm: the first raster scan assigns provisional
    labels and records equivalences in a union-find forest; the second
    scan rewrites each pixel with the final label of its root. Final
    labels are numbered 1..R in the order the regions are first touched
    by the raster scan, which makes the output deterministic.
    """
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    arr = _as_binary_2d(mask)
    h, w = arr.shape
    provisional = np.zeros((h, w), dtype=np.int64)
    parent: list[int] = [0]  # parent[label]; index 0 unused

    def find(a: int) -> int:
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:  # path compression
            parent[a], a = root, parent[a]
        return root

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            # keep the smaller root so earlier raster labels win
            if ra < rb:
                parent[rb] = ra
            else:
                parent[ra] = rb

    if connectivity == 4:
        neighbors = ((-1, 0), (0, -1))
    else:
        neighbors = ((-1, -1), (-1, 0), (-1, 1), (0, -1))

    next_label = 1
    for r in range(h):
        for c in range(w):
            if not arr[r, c]:
                continue
            seen = []
            for dr, dc in neighbors:
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and provisional[rr, cc]:
                    seen.append(provisional[rr, cc])
            if not seen:
                provisional[r, c] = next_label
                parent.append(next_label)
                next_label += 1
            else:
                lab = min(seen)
                provisional[r, c] = lab
                for other in seen:
                    union(lab, other)

    # second pass: map every root to its final label in raster discovery order
    final_of_root: dict[int, int] = {}
    labels = np.zeros((h, w), dtype=np.int64)
    areas: dict[int, int] = {}
    boxes: dict[int, list[int]] = {}
    for r in range(h):
        for c in range(w):
            p = provisional[r, c]
            if not p:
                continue
            root = find(p)
            lab = final_of_root.get(root)
            if lab is None:
                lab = len(final_of_root) + 1
                final_of_root[root] = lab
                areas[lab] = 0
                boxes[lab] = [r, c, r, c]
            labels[r, c] = lab
            areas[lab] += 1
            box = boxes[lab]
            box[0] = min(box[0], r)
            box[1] = min(box[1], c)
            box[2] = max(box[2], r)
            box[3] = max(box[3], c)

    regions = tuple(
        Region(label=lab, area=areas[lab], bbox=tuple(boxes[lab]))
        for lab in sorted(areas)
    )
    return LabeledMask(labels=labels, regions=regions)


def max_area_region(labeled: LabeledMask) -> Region | None:
    """Region with the strictly greatest area; ties go to the smallest label."""
    best: Region | None = None
    for region in labeled.regions:
        if best is None or region.area > best.area:
            best = region
    return best


def bbox_from_mask(mask: np.ndarray) -> Box:
    """Tightest inclusive rectangle enclosing the foreground pixels."""
    arr = _as_binary_2d(mask)
    rows = np.flatnonzero(arr.any(axis=1))
    cols = np.flatnonzero(arr.any(axis=0))
    if rows.size == 0:
        raise ValueError("bbox of an empty mask is undefined")
    return (int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks of identical shape."""
    a = np.asarray(pred)
    b = np.asarray(gt)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a != 0
    b = b != 0
    inter = int(np.count_nonzero(a & b))
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return inter / union


def bbox_iou(a: Box, b: Box) -> float:
    """IoU of two inclusive (top, left, bottom, right) pixel boxes."""
    top = max(a[0], b[0])
    left = max(a[1], b[1])
    bottom = min(a[2], b[2])
    right = min(a[3], b[3])
    ih = bottom - top + 1
    iw = right - left + 1
    if ih <= 0 or iw <= 0:
        return 0.0
    inter = ih * iw
    area_a = (a[2] - a[0] + 1) * (a[3] - a[1] + 1)
    area_b = (b[2] - b[0] + 1) * (b[3] - b[1] + 1)
    return inter / (area_a + area_b - inter)


@dataclass(frozen=True)
class Detection:
    """One scored box prediction on one frame."""

    frame: int
    category: int
    score: float
    bbox: Box


@dataclass(frozen=True)
class GroundTruthBox:
    """One annotated box on one frame."""

    frame: int
    category: int
    bbox: Box


def _average_precision(
    dets: list[Detection], gts: list[GroundTruthBox], alpha: float
) -> float:
    """All-points-interpolated AP for one category."""
    n_gt = len(gts)
    if n_gt == 0:
        return 0.0
    # stable sort by descending score: ties keep input order
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    matched = [False] * n_gt
    tp = np.zeros(len(dets))
    fp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        det = dets[i]
        best_iou = 0.0
        best_j = -1
        for j, gt in enumerate(gts):
            if matched[j] or gt.frame != det.frame:
                continue
            iou = bbox_iou(det.bbox, gt.bbox)
            if iou > best_iou:
                best_iou = iou
                best_j = j
        if best_j >= 0 and best_iou >= alpha:
            matched[best_j] = True
            tp[rank] = 1
        else:
            fp[rank] = 1
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1)
    # precision envelope: best precision achievable at recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_recall = 0.0
    for k in range(len(dets)):
        if recall[k] > prev_recall:
            ap += (recall[k] - prev_recall) * envelope[k]
            prev_recall = recall[k]
    return float(ap)


def frame_map(
    detections: list[Detection],
    ground_truth: list[GroundTruthBox],
    alpha: float = 0.5,
) -> float:
    """Frame-level mean average precision at box-IoU threshold alpha.

    Detections are ranked by descending score per category (stable under
    ties), matched greedily to the highest-IoU unmatched ground-truth box
    on the same frame when that IoU reaches alpha; each ground-truth box
    can match at most once. Per-category AP uses all-points interpolation
    and the mean runs over categories that have at least one ground-truth
    box. No ground truth at all yields 0.0.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    categories = sorted({gt.category for gt in ground_truth})
    if not categories:
        return 0.0
    aps = []
    for cat in categories:
        dets = [d for d in detections if d.category == cat]
        gts = [g for g in ground_truth if g.category == cat]
        aps.append(_average_precision(dets, gts, alpha))
    return float(np.mean(aps))
