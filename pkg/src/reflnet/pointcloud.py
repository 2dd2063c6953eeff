"""Point-cloud container and exact geometric primitives.

All neighbour queries are exact brute-force scans evaluated in row chunks, so
results never depend on an acceleration structure.  Distances are always
``sqrt(sum((a - b)**2))`` computed the same way everywhere, which makes tie
handling reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from ._io import read_text, write_text_atomic
from .errors import CountError, DimensionError, FileFormatError, LabelError
from .rng import SplitMix64

_CHUNK_ELEMS = 4_000_000


@dataclass(frozen=True)
class PointCloud:
    coords: np.ndarray
    colors: np.ndarray
    labels: Optional[np.ndarray] = None
    scene_id: str = ""
    num_classes: int = 0

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.float64).reshape(-1, 3)
        colors = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if coords.shape != colors.shape:
            raise DimensionError(f"coords {coords.shape} and colors {colors.shape} differ")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coords must be finite")
        if colors.size and (colors.min() < 0.0 or colors.max() > 1.0):
            raise ValueError("colors must lie in [0, 1]")
        coords.flags.writeable = False
        colors.flags.writeable = False
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "colors", colors)
        if self.labels is not None:
            labels = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != coords.shape[0]:
                raise DimensionError(f"{labels.shape[0]} labels for {coords.shape[0]} points")
            if labels.size and self.num_classes and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise LabelError(f"labels outside [0, {self.num_classes})")
            labels.flags.writeable = False
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.coords.shape[0]

    def subset(self, idx) -> "PointCloud":
        return PointCloud(
            self.coords[idx],
            self.colors[idx],
            None if self.labels is None else self.labels[idx],
            self.scene_id,
            self.num_classes,
        )


@dataclass
class NeighborIndex:
    """k nearest neighbours per point, self excluded, ascending distance."""

    k: int
    neighbors: np.ndarray
    distances: np.ndarray
    _mean_op: Optional[sp.csr_matrix] = field(default=None, repr=False, compare=False)

    def mean_operator(self) -> sp.csr_matrix:
        """Sparse N x N matrix whose product with X averages X over neighbours."""
        if self._mean_op is None:
            n = self.neighbors.shape[0]
            rows = np.repeat(np.arange(n), self.k)
            vals = np.full(rows.size, 1.0 / self.k) if self.k else np.zeros(0)
            self._mean_op = sp.csr_matrix(
                (vals, (rows, self.neighbors.reshape(-1))), shape=(n, n)
            )
        return self._mean_op


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def _row_chunks(n_rows: int, n_cols: int):
    step = max(1, _CHUNK_ELEMS // max(1, 3 * n_cols))
    for start in range(0, n_rows, step):
        yield start, min(n_rows, start + step)


def voxel_downsample(pc: PointCloud, voxel_size: float) -> Tuple[PointCloud, np.ndarray]:
    """Average points per occupied grid cell anchored at the origin.

    Returns the reduced cloud and, for every original point, the index of the
    voxel it fell into.  Voxels are ordered by first occurrence in the input.
    Labels pool by majority vote, ties to the lowest class id.
    """
    if not voxel_size > 0:
        raise ValueError(f"voxel_size must be positive, got {voxel_size}")
    n = len(pc)
    if n == 0:
        return pc, np.zeros(0, dtype=np.int64)
    cells = np.floor(pc.coords / voxel_size).astype(np.int64)
    _, first, inverse = np.unique(cells, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    # renumber voxels by first appearance so output order follows input order
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    origin_map = rank[inverse]
    m = order.size
    counts = np.bincount(origin_map, minlength=m).astype(np.float64)
    coords = np.stack([np.bincount(origin_map, pc.coords[:, a], m) for a in range(3)], 1) / counts[:, None]
    colors = np.stack([np.bincount(origin_map, pc.colors[:, a], m) for a in range(3)], 1) / counts[:, None]
    labels = None
    if pc.labels is not None:
        n_cls = max(int(pc.labels.max()) + 1 if n else 1, pc.num_classes)
        votes = np.zeros((m, n_cls), dtype=np.int64)
        np.add.at(votes, (origin_map, pc.labels), 1)
        labels = votes.argmax(axis=1)
    colors = np.clip(colors, 0.0, 1.0)
    return PointCloud(coords, colors, labels, pc.scene_id, pc.num_classes), origin_map


def farthest_point_sample(coords: np.ndarray, m: int, seed: int) -> np.ndarray:
    """Greedy maximin sampling; start index drawn uniformly from ``seed``."""
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if m < 1 or m > n:
        raise CountError(f"cannot sample {m} of {n} points")
    start = SplitMix64(seed).randbelow(n)
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    mind = np.full(n, np.inf)
    last = start
    for i in range(1, m):
        diff = coords - coords[last]
        mind = np.minimum(mind, np.sqrt((diff * diff).sum(axis=1)))
        mind[chosen[:i]] = -1.0
        last = int(np.argmax(mind))  # first maximum = lowest index
        chosen[i] = last
    return chosen


def assign_nearest_center(coords: np.ndarray, centers: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if centers.shape[0] == 0:
        raise CountError("no centers to assign to")
    out = np.empty(coords.shape[0], dtype=np.int64)
    for lo, hi in _row_chunks(coords.shape[0], centers.shape[0]):
        out[lo:hi] = np.argmin(pairwise_distances(coords[lo:hi], centers), axis=1)
    return out


def _knn_rows(coords, rows, k, nbr, dist):
    """Brute-force exact neighbours for the given row indices."""
    n = coords.shape[0]
    for lo, hi in _row_chunks(rows.size, n):
        sel = rows[lo:hi]
        d = pairwise_distances(coords[sel], coords)
        r = np.arange(sel.size)
        d[r, sel] = np.inf
        kth = np.partition(d, k - 1, axis=1)[:, k - 1 : k]
        # every candidate up to and including ties at the k-th distance
        rr, cols = np.nonzero(d <= kth)
        vals = d[rr, cols]
        order = np.lexsort((cols, vals, rr))
        rr, cols, vals = rr[order], cols[order], vals[order]
        pos = np.arange(rr.size) - np.searchsorted(rr, r)[rr]
        keep = pos < k
        nbr[sel[rr[keep]], pos[keep]] = cols[keep]
        dist[sel[rr[keep]], pos[keep]] = vals[keep]


def knn(coords: np.ndarray, k: int) -> NeighborIndex:
    """Exact k nearest neighbours, self excluded, ties broken by lower index.

    A KD-tree proposes ``k + 8`` candidates per point; distances are then
    recomputed exactly and sorted by (distance, index).  Rows whose k-th
    distance is not strictly inside the candidate radius fall back to a full
    scan, so the result always equals brute force.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    n = coords.shape[0]
    if k >= n or k < 0:
        raise CountError(f"k={k} requires more than {k} points, got {n}")
    nbr = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k))
    if k == 0:
        return NeighborIndex(0, nbr, dist)
    q = min(n, k + 9)
    if q == n:
        _knn_rows(coords, np.arange(n), k, nbr, dist)
        return NeighborIndex(k, nbr, dist)
    _, cand = cKDTree(coords).query(coords, k=q)
    diff = coords[cand] - coords[:, None, :]
    d = np.sqrt((diff * diff).sum(axis=-1))
    d[cand == np.arange(n)[:, None]] = np.inf
    order = np.lexsort((cand, d), axis=1)
    cand = np.take_along_axis(cand, order, axis=1)
    d = np.take_along_axis(d, order, axis=1)
    nbr[:] = cand[:, :k]
    dist[:] = d[:, :k]
    finite_max = np.where(np.isfinite(d), d, -np.inf).max(axis=1)
    unsure = np.flatnonzero(dist[:, -1] * (1 + 1e-9) + 1e-300 >= finite_max)
    if unsure.size:
        _knn_rows(coords, unsure, k, nbr, dist)
    return NeighborIndex(k, nbr, dist)


# -- file formats ------------------------------------------------------------

def format_pcd(pc: PointCloud) -> str:
    lines = [f"pcd v1 {len(pc)} {pc.num_classes}"]
    labels = pc.labels if pc.labels is not None else np.full(len(pc), -1)
    for c, col, lab in zip(pc.coords, pc.colors, labels):
        lines.append(
            " ".join(f"{v:.9g}" for v in (*c, *col)) + f" {int(lab)}"
        )
    return "\n".join(lines) + "\n"


def parse_pcd(text: str, scene_id: str = "") -> PointCloud:
    lines = text.splitlines()
    try:
        magic, version, n, num_classes = lines[0].split()
        if (magic, version) != ("pcd", "v1"):
            raise ValueError("bad header")
        n, num_classes = int(n), int(num_classes)
        body = np.array([ln.split() for ln in lines[1 : 1 + n]], dtype=np.float64).reshape(n, 7)
    except (ValueError, IndexError) as exc:
        raise FileFormatError(f"{scene_id or 'pcd'}: malformed point cloud ({exc})") from exc
    labels = body[:, 6].astype(np.int64)
    if n and labels.min() < 0:
        labels = None if np.all(labels < 0) else labels
    return PointCloud(body[:, :3], body[:, 3:6], labels, scene_id, num_classes)


def save_pcd(pc: PointCloud, path) -> None:
    write_text_atomic(path, format_pcd(pc))


def load_pcd(path) -> PointCloud:
    from pathlib import Path

    return parse_pcd(read_text(path), Path(path).stem)


def format_regions(region_of: np.ndarray, num_regions: int) -> str:
    body = "\n".join(str(int(r)) for r in region_of)
    return f"regions v1 {len(region_of)} {num_regions}\n" + (body + "\n" if body else "")


def parse_regions(text: str) -> Tuple[np.ndarray, int]:
    lines = text.splitlines()
    try:
        magic, version, n, m = lines[0].split()
        if (magic, version) != ("regions", "v1"):
            raise ValueError("bad header")
        ids = np.array([int(x) for x in lines[1 : 1 + int(n)]], dtype=np.int64)
        if ids.size != int(n):
            raise ValueError("truncated body")
    except (ValueError, IndexError) as exc:
        raise FileFormatError(f"malformed regions file ({exc})") from exc
    return ids, int(m)
