"""Semantic-spatial region extraction.

Points are grouped by their argmax class, then every group is cut into
``max(1, N_k // s)`` regions: centers are picked by farthest point sampling
inside the group and every group point joins its nearest center.  Regions are
numbered globally by (class id, center order).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np

from ._io import read_text, write_text_atomic
from .errors import DimensionError, FileFormatError
from .pointcloud import PointCloud, assign_nearest_center, farthest_point_sample, format_regions


@dataclass
class RegionPartition:
    region_of: np.ndarray
    num_regions: int
    centers: np.ndarray
    region_class: np.ndarray
    region_size: int
    group_sizes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    group_region_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def point_counts(self) -> np.ndarray:
        return np.bincount(self.region_of, minlength=self.num_regions)


def semantic_grouping(logits: np.ndarray) -> np.ndarray:
    return np.argmax(np.asarray(logits), axis=1).astype(np.int64)


def region_count_for_group(n_k: int, s: int) -> int:
    """``floor(n_k / s)`` regions, but never fewer than one."""
    if n_k < 1 or s < 1:
        raise ValueError(f"need n_k >= 1 and s >= 1, got {n_k}, {s}")
    return max(1, n_k // s)


def extract_regions(pc: PointCloud, logits: np.ndarray, s: int, seed: int) -> RegionPartition:
    n = len(pc)
    logits = np.asarray(logits)
    if logits.ndim != 2 or logits.shape[0] != n:
        raise DimensionError(f"logits shape {logits.shape} does not match {n} points")
    if s < 1:
        raise ValueError(f"region size must be >= 1, got {s}")
    num_classes = logits.shape[1]
    region_of = np.full(n, -1, dtype=np.int64)
    group_sizes = np.zeros(num_classes, dtype=np.int64)
    group_counts = np.zeros(num_classes, dtype=np.int64)
    centers: List[np.ndarray] = []
    region_class: List[int] = []
    if n == 0:
        return RegionPartition(region_of, 0, np.zeros((0, 3)), np.zeros(0, dtype=np.int64), s,
                               group_sizes, group_counts)
    pred = semantic_grouping(logits)
    offset = 0
    for k in range(num_classes):
        members = np.flatnonzero(pred == k)
        if members.size == 0:
            continue
        pts = pc.coords[members]
        m_k = region_count_for_group(members.size, s)
        picked = farthest_point_sample(pts, m_k, seed ^ k)
        local = assign_nearest_center(pts, pts[picked])
        region_of[members] = offset + local
        centers.append(pts[picked])
        region_class.extend([k] * m_k)
        group_sizes[k] = members.size
        group_counts[k] = m_k
        offset += m_k
    return RegionPartition(
        region_of, offset, np.vstack(centers), np.asarray(region_class, dtype=np.int64), s,
        group_sizes, group_counts,
    )


def format_centers(partition: RegionPartition) -> str:
    lines = [f"centers v1 {partition.num_regions}"]
    for cls, c in zip(partition.region_class, partition.centers):
        lines.append(f"{int(cls)} " + " ".join(f"{v:.9g}" for v in c))
    return "\n".join(lines) + "\n"


def parse_centers(text: str):
    lines = text.splitlines()
    try:
        magic, version, m = lines[0].split()
        if (magic, version) != ("centers", "v1"):
            raise ValueError("bad header")
        rows = [ln.split() for ln in lines[1 : 1 + int(m)]]
        cls = np.array([int(r[0]) for r in rows], dtype=np.int64)
        xyz = np.array([[float(v) for v in r[1:4]] for r in rows], dtype=np.float64).reshape(-1, 3)
    except (ValueError, IndexError) as exc:
        raise FileFormatError(f"malformed centers file ({exc})") from exc
    return cls, xyz


def save_partition(partition: RegionPartition, regions_path, centers_path=None) -> None:
    write_text_atomic(regions_path, format_regions(partition.region_of, partition.num_regions))
    if centers_path is not None:
        write_text_atomic(centers_path, format_centers(partition))


def load_centers(path):
    return parse_centers(read_text(path))
