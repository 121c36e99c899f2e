"""Point-cloud primitives: boxes, dynamic voxel downsampling, exact NN queries, PLY IO."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from plyfile import PlyData, PlyElement
from scipy.spatial import cKDTree


class PointCloud:
    """Ordered world-frame points with optional per-point RGB in [0, 1]."""

    __slots__ = ("points", "colors")

    def __init__(self, points, colors=None):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1 and pts.size == 3:
            pts = pts.reshape(1, 3)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        if colors is not None:
            colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
            if len(colors) != len(pts):
                raise ValueError("colors and points differ in length")
        self.points = pts
        self.colors = colors

    def __len__(self) -> int:
        return len(self.points)

    def __repr__(self) -> str:
        return f"PointCloud(n={len(self)}, colors={self.colors is not None})"

    @property
    def has_colors(self) -> bool:
        return self.colors is not None

    def transformed(self, rotation, translation) -> "PointCloud":
        pts = self.points @ np.asarray(rotation, dtype=np.float64).T + np.asarray(translation, dtype=np.float64)
        return PointCloud(pts, self.colors)

    def take(self, idx) -> "PointCloud":
        return PointCloud(self.points[idx], None if self.colors is None else self.colors[idx])

    @staticmethod
    def concat(clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud(np.empty((0, 3)))
        pts = np.concatenate([c.points for c in clouds], axis=0)
        if all(c.colors is not None for c in clouds):
            cols = np.concatenate([c.colors for c in clouds], axis=0)
        else:
            cols = None
        return PointCloud(pts, cols)


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return (self.min + self.max) / 2.0

    def contains(self, point, strict: bool = False) -> bool:
        p = np.asarray(point, dtype=np.float64)
        if strict:
            return bool(np.all(p > self.min) and np.all(p < self.max))
        return bool(np.all(p >= self.min) and np.all(p <= self.max))

    def gap(self, other: "Aabb") -> float:
        """Euclidean distance between two boxes (0 when they overlap)."""
        d = np.maximum(0.0, np.maximum(self.min - other.max, other.min - self.max))
        return float(np.sqrt((d * d).sum()))

    def to_dict(self) -> dict:
        return {"min": [float(v) for v in self.min], "max": [float(v) for v in self.max]}


def _require_points(cloud: PointCloud) -> np.ndarray:
    if cloud is None or len(cloud) == 0:
        raise ValueError("empty cloud")
    return cloud.points


def bbox(cloud: PointCloud) -> Aabb:
    pts = _require_points(cloud)
    return Aabb(pts.min(axis=0), pts.max(axis=0))


def bbox_diagonal(box: Aabb) -> float:
    ext = box.max - box.min
    return float(np.sqrt((ext * ext).sum()))


def dynamic_voxel_size(cloud: PointCloud, base: float) -> float:
    """Voxel edge that grows with the square root of the object's bbox diagonal."""
    if base <= 0:
        raise ValueError("base voxel must be positive")
    return base * math.sqrt(bbox_diagonal(bbox(cloud)))


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Replace the points of each occupied cell by their centroid.

    Cells are ``floor(coord / voxel)`` on a world-origin grid. Output is ordered
    by cell key, so the result does not depend on input order beyond
    floating-point summation.
    """
    if not voxel > 0:
        raise ValueError(f"voxel size must be positive, got {voxel}")
    n = len(cloud)
    if n == 0:
        return PointCloud(np.empty((0, 3)), None if cloud.colors is None else np.empty((0, 3)))
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    kmin = keys.min(axis=0)
    span = keys.max(axis=0) - kmin + 1
    if float(span[0]) * float(span[1]) * float(span[2]) < 2**62:
        k = keys - kmin
        flat = (k[:, 0] * span[1] + k[:, 1]) * span[2] + k[:, 2]
        _, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)
    else:
        _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(counts)
    sums = np.zeros((m, 3))
    for axis in range(3):
        sums[:, axis] = np.bincount(inverse, weights=cloud.points[:, axis], minlength=m)
    pts = sums / counts[:, None]
    cols = None
    if cloud.colors is not None:
        csum = np.zeros((m, 3))
        for axis in range(3):
            csum[:, axis] = np.bincount(inverse, weights=cloud.colors[:, axis], minlength=m)
        cols = csum / counts[:, None]
    # centroids can drift one ulp outside the extremes; clamp to the input box
    pts = np.clip(pts, cloud.points.min(axis=0), cloud.points.max(axis=0))
    return PointCloud(pts, cols)


def dynamic_nn_threshold(a: PointCloud, b: PointCloud, base: float) -> float:
    if base <= 0:
        raise ValueError("base voxel must be positive")
    da = bbox_diagonal(bbox(a))
    db = bbox_diagonal(bbox(b))
    return base * (math.sqrt(da) + math.sqrt(db)) / 2.0


class SpatialIndex:
    """Exact nearest-neighbour index over one cloud (k-d tree, no approximation)."""

    def __init__(self, cloud: PointCloud):
        self.points = _require_points(cloud)
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def nearest(self, queries, upper_bound: float = np.inf):
        """Distances and indices of the nearest indexed point; inf/len() when beyond ``upper_bound``."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        return self._tree.query(q, k=1, distance_upper_bound=upper_bound)

    def within(self, point, radius: float) -> list[int]:
        return sorted(self._tree.query_ball_point(np.asarray(point, dtype=np.float64), radius))


def nn_ratio(query: PointCloud, target, threshold: float) -> float:
    """Fraction of ``query`` points with a ``target`` point at distance <= ``threshold``.

    ``target`` may be a PointCloud or a prebuilt SpatialIndex.
    """
    q = _require_points(query)
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    index = target if isinstance(target, SpatialIndex) else SpatialIndex(target)
    # the tree prunes on squared distance with a strict bound; widen it well
    # clear of underflow, then apply the inclusive test exactly
    bound = float(threshold) * (1.0 + 1e-9) + 1e-150
    dist, _ = index.nearest(q, upper_bound=bound)
    hits = np.count_nonzero(dist <= threshold)
    return hits / len(q)


def centroid(cloud: PointCloud) -> np.ndarray:
    pts = _require_points(cloud)
    return pts.mean(axis=0)


# --- PLY ---------------------------------------------------------------------


def write_ply(path, cloud: PointCloud, binary: bool = True, extra: Optional[dict] = None) -> None:
    """Write xyz as float32, rgb as uint8, plus optional extra per-vertex arrays (e.g. ``label``)."""
    fields = [("x", "f4"), ("y", "f4"), ("z", "f4")]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    extra = extra or {}
    for name, values in extra.items():
        arr = np.asarray(values)
        fields.append((name, "i4" if np.issubdtype(arr.dtype, np.integer) else "f4"))
    data = np.empty(len(cloud), dtype=fields)
    data["x"], data["y"], data["z"] = cloud.points.T
    if cloud.colors is not None:
        rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.uint8)
        data["red"], data["green"], data["blue"] = rgb.T
    for name, values in extra.items():
        data[name] = np.asarray(values)
    el = PlyElement.describe(data, "vertex")
    PlyData([el], text=not binary, byte_order="<").write(str(path))


def read_ply(path) -> tuple[PointCloud, dict]:
    """Read a PLY vertex element. Returns the cloud and any non-xyz/rgb vertex properties."""
    ply = PlyData.read(str(path))
    v = ply["vertex"].data
    names = v.dtype.names
    pts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    cols = None
    if all(c in names for c in ("red", "green", "blue")):
        cols = np.stack([v["red"], v["green"], v["blue"]], axis=1).astype(np.float64) / 255.0
    extras = {n: np.asarray(v[n]) for n in names if n not in ("x", "y", "z", "red", "green", "blue")}
    return PointCloud(pts, cols), extras


def load_cloud(path) -> PointCloud:
    return read_ply(path)[0]


def save_cloud(path, cloud: PointCloud) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_ply(path, cloud, binary=True)
