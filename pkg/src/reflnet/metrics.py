"""Segmentation and over-segmentation quality metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from ._io import write_text_atomic
from .errors import CountError, DimensionError
from .pointcloud import NeighborIndex
from .ssre import RegionPartition


@dataclass
class EvalReport:
    per_class_iou: np.ndarray  # NaN where the class is absent from both pred and gt
    miou: float
    counts: np.ndarray  # rows = ground truth, cols = prediction
    region_entropy_per_region: Optional[np.ndarray] = None
    entropy_scene: Optional[float] = None
    boundary_recall: Optional[float] = None
    extra: Dict[str, float] = field(default_factory=dict)


def confusion_matrix(pred, gt, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} and gt {gt.shape} differ in length")
    if pred.size and (min(pred.min(), gt.min()) < 0 or max(pred.max(), gt.max()) >= num_classes):
        raise ValueError(f"class ids must lie in [0, {num_classes})")
    return np.bincount(gt * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)


def iou_from_confusion(counts: np.ndarray):
    tp = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)
    present = ~np.isnan(iou)
    miou = float(iou[present].mean()) if present.any() else float("nan")
    return iou, miou


def mean_iou(pred, gt, num_classes: int) -> EvalReport:
    counts = confusion_matrix(pred, gt, num_classes)
    iou, miou = iou_from_confusion(counts)
    return EvalReport(iou, miou, counts)


def region_entropy(partition: RegionPartition, gt, num_classes: int):
    """Natural-log entropy of the ground-truth mix in every region, and its mean."""
    gt = np.asarray(gt, dtype=np.int64)
    m = partition.num_regions
    hist = np.bincount(partition.region_of * num_classes + gt, minlength=m * num_classes)
    hist = hist.reshape(m, num_classes).astype(np.float64)
    frac = hist / hist.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(frac > 0, frac * np.log(np.where(frac > 0, frac, 1.0)), 0.0)
    ent = -terms.sum(axis=1)
    ent = np.maximum(ent, 0.0)  # -0.0 for pure regions
    return ent, float(ent.mean()) if m else 0.0


def dataset_entropy(scene_means: Sequence[float]) -> float:
    if len(scene_means) == 0:
        raise CountError("dataset entropy needs at least one scene")
    return float(np.mean(np.asarray(scene_means, dtype=np.float64)))


def boundary_recall(
    partition: RegionPartition,
    gt,
    coords: np.ndarray,
    nn: NeighborIndex,
    tolerance: float,
) -> float:
    """Share of ground-truth boundary points near a region boundary point.

    A point is on a boundary when one of its k neighbours carries a different
    label (ground truth) or region id (partition).  Returns 1.0 when the scene
    has no ground-truth boundary.
    """
    gt = np.asarray(gt, dtype=np.int64)
    gt_edge = (gt[nn.neighbors] != gt[:, None]).any(axis=1)
    reg = partition.region_of
    reg_edge = (reg[nn.neighbors] != reg[:, None]).any(axis=1)
    if not gt_edge.any():
        return 1.0
    if not reg_edge.any():
        return 0.0
    tree = cKDTree(coords[reg_edge])
    dist, _ = tree.query(coords[gt_edge], k=1)
    return float(np.mean(dist <= tolerance))


def format_report(report: EvalReport, class_names: Optional[List[str]] = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "class", "value"])
    for c, v in enumerate(report.per_class_iou):
        name = class_names[c] if class_names else str(c)
        w.writerow(["iou", name, "" if np.isnan(v) else f"{v:.9g}"])
    w.writerow(["miou", "", f"{report.miou:.9g}"])
    if report.entropy_scene is not None:
        w.writerow(["entropy_scene", "", f"{report.entropy_scene:.9g}"])
    if report.boundary_recall is not None:
        w.writerow(["boundary_recall", "", f"{report.boundary_recall:.9g}"])
    for k, v in report.extra.items():
        w.writerow([k, "", f"{v:.9g}"])
    return buf.getvalue()


def write_report(report: EvalReport, path, class_names=None) -> None:
    write_text_atomic(path, format_report(report, class_names))
