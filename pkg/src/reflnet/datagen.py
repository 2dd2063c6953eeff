"""Deterministic synthetic indoor rooms with per-point labels.

A room is a floor plus four walls; furniture is a set of axis-aligned boxes
standing on the floor.  Every surface is sampled by binomial thinning: for a
patch of area ``A`` at density ``rho`` we draw ``ceil(2*A*rho)`` uniform
candidates and keep each with probability ``A*rho / candidates``.

Classes that form an ambiguity pair share one colour mean, so telling them
apart needs shape and surrounding context.  Context is built in: chairs are
placed next to tables, cabinets stand against walls, and "other" objects are
scattered anywhere.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ._io import read_text, write_text_atomic
from .errors import FileFormatError
from .pointcloud import PointCloud, format_pcd, load_pcd
from .rng import SplitMix64

log = logging.getLogger(__name__)

CLASS_NAMES = ["floor", "wall", "table", "chair", "cabinet", "other"]
FLOOR, WALL, TABLE, CHAIR, CABINET, OTHER = range(6)

DEFAULT_COLORS = {
    FLOOR: (0.55, 0.45, 0.35),
    WALL: (0.82, 0.82, 0.78),
    TABLE: (0.60, 0.38, 0.20),
    CHAIR: (0.25, 0.35, 0.60),
    CABINET: (0.45, 0.30, 0.25),
    OTHER: (0.30, 0.55, 0.40),
}

# (width range, depth range, height range) in metres
BOX_SIZES = {
    TABLE: ((1.0, 1.6), (0.7, 1.0), (0.70, 0.78)),
    CHAIR: ((0.40, 0.50), (0.40, 0.50), (0.80, 1.00)),
    CABINET: ((0.6, 1.2), (0.4, 0.6), (1.4, 2.0)),
    OTHER: ((0.3, 0.9), (0.3, 0.9), (0.3, 1.2)),
}

DEFAULT_AMBIGUITY = ((TABLE, CABINET), (CHAIR, OTHER))
PLACEMENT_TRIES = 1000


@dataclass
class SceneSpec:
    room_x: float = 5.0
    room_y: float = 5.0
    room_z: float = 2.6
    density: float = 25.0
    object_counts: Dict[int, int] = field(
        default_factory=lambda: {TABLE: 2, CHAIR: 4, CABINET: 2, OTHER: 3}
    )
    color_means: Dict[int, Tuple[float, float, float]] = field(
        default_factory=lambda: dict(DEFAULT_COLORS)
    )
    color_sigma: float = 0.05
    ambiguity_pairs: Sequence[Tuple[int, int]] = DEFAULT_AMBIGUITY
    seed: int = 0

    def __post_init__(self):
        if self.density <= 0:
            raise ValueError("density must be positive")
        if min(self.room_x, self.room_y, self.room_z) <= 0:
            raise ValueError("room extents must be positive")

    def effective_colors(self) -> Dict[int, np.ndarray]:
        colors = {k: np.asarray(v, dtype=np.float64) for k, v in self.color_means.items()}
        for a, b in self.ambiguity_pairs:
            colors[b] = colors[a]
        return colors


@dataclass
class Box:
    cls: int
    x0: float
    y0: float
    x1: float
    y1: float
    height: float

    def overlaps(self, other: "Box") -> bool:
        return self.x0 < other.x1 and other.x0 < self.x1 and self.y0 < other.y1 and other.y0 < self.y1


def _sample_rect(rng: SplitMix64, area: float, density: float) -> np.ndarray:
    """Binomially thinned uniform samples in the unit square, shape (n, 2)."""
    expected = area * density
    cand = max(1, math.ceil(2.0 * expected))
    uv = rng.uniform(2 * cand).reshape(cand, 2)
    keep = rng.uniform(cand) < expected / cand
    return uv[keep]


def _plane(rng, origin, u_axis, v_axis, density) -> np.ndarray:
    origin, u_axis, v_axis = (np.asarray(a, dtype=np.float64) for a in (origin, u_axis, v_axis))
    area = np.linalg.norm(u_axis) * np.linalg.norm(v_axis)
    uv = _sample_rect(rng, area, density)
    return origin + uv[:, :1] * u_axis + uv[:, 1:] * v_axis


def _box_surface(rng, box: Box, density) -> np.ndarray:
    w, d, h = box.x1 - box.x0, box.y1 - box.y0, box.height
    o = np.array([box.x0, box.y0, 0.0])
    faces = [
        _plane(rng, o + [0, 0, h], [w, 0, 0], [0, d, 0], density),  # top
        _plane(rng, o, [w, 0, 0], [0, 0, h], density),
        _plane(rng, o + [0, d, 0], [w, 0, 0], [0, 0, h], density),
        _plane(rng, o, [0, d, 0], [0, 0, h], density),
        _plane(rng, o + [w, 0, 0], [0, d, 0], [0, 0, h], density),
    ]
    return np.vstack(faces)


def _draw_size(rng, cls):
    (w0, w1), (d0, d1), (h0, h1) = BOX_SIZES[cls]
    w, d, h = rng.uniform(), rng.uniform(), rng.uniform()
    w, d, h = w0 + (w1 - w0) * w, d0 + (d1 - d0) * d, h0 + (h1 - h0) * h
    if rng.uniform() < 0.5:
        w, d = d, w
    return w, d, h


def _propose(rng, cls, spec: SceneSpec, placed: List[Box]) -> Box:
    w, d, h = _draw_size(rng, cls)
    X, Y = spec.room_x, spec.room_y
    if cls == CABINET:
        side = rng.randbelow(4)
        if side in (0, 1):
            x0 = rng.uniform(low=0.0, high=max(0.0, X - w))
            y0 = 0.01 if side == 0 else Y - d - 0.01
        else:
            y0 = rng.uniform(low=0.0, high=max(0.0, Y - d))
            x0 = 0.01 if side == 2 else X - w - 0.01
        return Box(cls, x0, y0, x0 + w, y0 + d, h)
    tables = [b for b in placed if b.cls == TABLE]
    if cls == CHAIR and tables:
        t = tables[rng.randbelow(len(tables))]
        gap = rng.uniform(low=0.05, high=0.25)
        side = rng.randbelow(4)
        if side in (0, 1):
            x0 = rng.uniform(low=t.x0 - 0.5 * w, high=t.x1 - 0.5 * w)
            y0 = t.y0 - gap - d if side == 0 else t.y1 + gap
        else:
            y0 = rng.uniform(low=t.y0 - 0.5 * d, high=t.y1 - 0.5 * d)
            x0 = t.x0 - gap - w if side == 2 else t.x1 + gap
        return Box(cls, x0, y0, x0 + w, y0 + d, h)
    margin = 0.3 if cls == TABLE else 0.05
    x0 = rng.uniform(low=margin, high=max(margin, X - margin - w))
    y0 = rng.uniform(low=margin, high=max(margin, Y - margin - d))
    return Box(cls, x0, y0, x0 + w, y0 + d, h)


def _inside(box: Box, spec: SceneSpec) -> bool:
    return box.x0 >= 0 and box.y0 >= 0 and box.x1 <= spec.room_x and box.y1 <= spec.room_y and box.height < spec.room_z


def place_boxes(spec: SceneSpec, rng: SplitMix64) -> Tuple[List[Box], int]:
    placed: List[Box] = []
    skipped = 0
    for cls in (TABLE, CABINET, CHAIR, OTHER):
        for _ in range(spec.object_counts.get(cls, 0)):
            for _ in range(PLACEMENT_TRIES):
                box = _propose(rng, cls, spec, placed)
                if _inside(box, spec) and not any(box.overlaps(b) for b in placed):
                    placed.append(box)
                    break
            else:
                skipped += 1
    if skipped:
        log.warning("scene seed %d: skipped %d unplaceable objects", spec.seed, skipped)
    return placed, skipped


def generate_scene(spec: SceneSpec, scene_id: str = "") -> Tuple[PointCloud, dict]:
    """Sample a labelled room; returns the cloud and placement metadata."""
    rng = SplitMix64(spec.seed)
    X, Y, Z = spec.room_x, spec.room_y, spec.room_z
    boxes, skipped = place_boxes(spec, rng)
    parts: List[Tuple[np.ndarray, int]] = []
    floor = _plane(rng, [0, 0, 0], [X, 0, 0], [0, Y, 0], spec.density)
    hidden = np.zeros(len(floor), dtype=bool)
    for b in boxes:
        hidden |= (floor[:, 0] > b.x0) & (floor[:, 0] < b.x1) & (floor[:, 1] > b.y0) & (floor[:, 1] < b.y1)
    parts.append((floor[~hidden], FLOOR))
    for origin, u, v in (
        ([0, 0, 0], [X, 0, 0], [0, 0, Z]),
        ([0, Y, 0], [X, 0, 0], [0, 0, Z]),
        ([0, 0, 0], [0, Y, 0], [0, 0, Z]),
        ([X, 0, 0], [0, Y, 0], [0, 0, Z]),
    ):
        parts.append((_plane(rng, origin, u, v, spec.density), WALL))
    for b in boxes:
        parts.append((_box_surface(rng, b, spec.density), b.cls))
    coords = np.vstack([p for p, _ in parts])
    labels = np.concatenate([np.full(len(p), c, dtype=np.int64) for p, c in parts])
    means = spec.effective_colors()
    colors = np.vstack([np.broadcast_to(means[c], (len(p), 3)) for p, c in parts])
    colors = np.clip(colors + spec.color_sigma * rng.normal(coords.shape[0] * 3).reshape(-1, 3), 0.0, 1.0)
    pc = PointCloud(coords, colors, labels, scene_id or f"scene_{spec.seed}", len(CLASS_NAMES))
    return pc, {"skipped": skipped, "boxes": boxes}


def random_scene_spec(seed: int, **overrides) -> SceneSpec:
    """Room size in [3, 8] m per side and furniture counts drawn from ``seed``."""
    rng = SplitMix64(seed ^ 0x5EED5EED)
    room_x, room_y = rng.uniform(low=3.0, high=8.0), rng.uniform(low=3.0, high=8.0)
    counts = {
        TABLE: 1 + rng.randbelow(2),
        CHAIR: 2 + rng.randbelow(4),
        CABINET: 1 + rng.randbelow(2),
        OTHER: 2 + rng.randbelow(3),
    }
    spec = SceneSpec(room_x=room_x, room_y=room_y, object_counts=counts, seed=seed)
    return replace(spec, **overrides)


def generate_dataset(out_dir, n_train: int, n_val: int, base_seed: int, **spec_overrides) -> Path:
    """Write ``n_train + n_val`` scenes and a manifest; returns the manifest path.

    Scene ``i`` uses seed ``base_seed + i``; validation scenes follow the
    training scenes, so the two seed ranges never overlap.
    """
    if n_train < 1 or n_val < 1:
        raise ValueError("n_train and n_val must be >= 1")
    out_dir = Path(out_dir)
    entries = []
    for i in range(n_train + n_val):
        seed = base_seed + i
        split = "train" if i < n_train else "val"
        name = f"{split}_{seed}.pcd"
        pc, _ = generate_scene(random_scene_spec(seed, **spec_overrides), scene_id=name[:-4])
        write_text_atomic(out_dir / name, format_pcd(pc))
        entries.append((name, seed, split))
    manifest = out_dir / "manifest.txt"
    write_manifest(manifest, entries)
    return manifest


def write_manifest(path, entries) -> None:
    lines = [f"manifest v1 {len(entries)}"] + [f"{p} {s} {split}" for p, s, split in entries]
    write_text_atomic(path, "\n".join(lines) + "\n")


def read_manifest(path, split: str = None) -> List[Tuple[Path, int, str]]:
    """Entries as (absolute path, seed, split); paths resolve against the manifest dir."""
    path = Path(path)
    lines = read_text(path).splitlines()
    try:
        magic, version, count = lines[0].split()
        if (magic, version) != ("manifest", "v1"):
            raise ValueError("bad header")
        out = []
        for ln in lines[1 : 1 + int(count)]:
            p, seed, sp = ln.split()
            out.append((path.parent / p, int(seed), sp))
        if len(out) != int(count):
            raise ValueError("truncated manifest")
    except (ValueError, IndexError) as exc:
        raise FileFormatError(f"{path}: malformed manifest ({exc})") from exc
    return [e for e in out if split is None or e[2] == split]


def load_split(path, split: str) -> List[PointCloud]:
    return [load_pcd(p) for p, _, _ in read_manifest(path, split)]
