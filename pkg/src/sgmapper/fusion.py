"""Incremental cross-frame object fusion.

Each frame's local objects are matched against the global list as it stood at
the start of the frame, using semantic agreement plus the dynamic
nearest-neighbour ratio. Matches are fused (running-mean embedding, cloud
union); the rest become new global objects.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

from . import geometry as geo
from .geometry import PointCloud, SpatialIndex
from .ingest import LocalObject, unit

log = logging.getLogger(__name__)

STRATEGIES = ("dynamic", "fixed")


@dataclass
class ViewRecord:
    frame_index: int
    confidence: float
    crop: Optional[str]
    camera_position: np.ndarray

    def to_dict(self) -> dict:
        return {
            "frame_index": int(self.frame_index),
            "confidence": float(self.confidence),
            "crop": self.crop,
            "camera_position": [float(v) for v in self.camera_position],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ViewRecord":
        return cls(int(d["frame_index"]), float(d["confidence"]), d.get("crop"), np.asarray(d["camera_position"], dtype=np.float64))


@dataclass
class GlobalObject:
    id: int
    embedding: np.ndarray
    raw_embedding: np.ndarray
    cloud: PointCloud
    n: int = 1
    views: list = field(default_factory=list)
    camera_position_sum: np.ndarray = field(default_factory=lambda: np.zeros(3))
    crops: dict = field(default_factory=dict)

    @property
    def average_camera(self) -> np.ndarray:
        return self.camera_position_sum / self.n

    def best_views(self, k: int) -> list:
        """Up to ``k`` view records, highest confidence first, earlier frames on ties."""
        return sorted(self.views, key=lambda v: (-v.confidence, v.frame_index))[:k]


class ObjectMap:
    """The global object list plus the knobs that govern how it grows."""

    def __init__(
        self,
        base_voxel: float = 0.01,
        sim_threshold: float = 0.45,
        *,
        strategy: str = "dynamic",
        refilter: bool = True,
        require_overlap: bool = False,
        keep_crops: int = 5,
    ):
        if not base_voxel > 0:
            raise ValueError("base_voxel must be > 0")
        if not 0.0 < sim_threshold < 2.0:
            raise ValueError("sim_threshold must lie in (0, 2)")
        if strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        self.base_voxel = float(base_voxel)
        self.sim_threshold = float(sim_threshold)
        self.strategy = strategy
        self.refilter = refilter
        self.require_overlap = require_overlap
        self.keep_crops = int(keep_crops)
        self.objects: list[GlobalObject] = []
        self.next_id = 0
        self.frames_seen = 0

    def __len__(self) -> int:
        return len(self.objects)

    def get(self, oid: int) -> GlobalObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)

    def voxel_for(self, cloud: PointCloud) -> float:
        if self.strategy == "fixed":
            return self.base_voxel
        return geo.dynamic_voxel_size(cloud, self.base_voxel)

    def threshold_for(self, a: PointCloud, b: PointCloud) -> float:
        if self.strategy == "fixed":
            return self.base_voxel
        return geo.dynamic_nn_threshold(a, b, self.base_voxel)

    # -- persistence -----------------------------------------------------------

    def to_dir(self, path) -> None:
        root = Path(path)
        (root / "clouds").mkdir(parents=True, exist_ok=True)
        objs = []
        for o in self.objects:
            geo.write_ply(root / "clouds" / f"{o.id:04d}.ply", o.cloud)
            for frame, crop in sorted(o.crops.items()):
                cdir = root / "crops" / f"{o.id:04d}"
                cdir.mkdir(parents=True, exist_ok=True)
                Image.fromarray(np.asarray(crop, dtype=np.uint8)).save(cdir / f"{frame:06d}.png")
            objs.append(
                {
                    "id": o.id,
                    "n": o.n,
                    "embedding": [float(v) for v in o.embedding],
                    "raw_embedding": [float(v) for v in o.raw_embedding],
                    "camera_position_sum": [float(v) for v in o.camera_position_sum],
                    "cloud": f"clouds/{o.id:04d}.ply",
                    "views": [v.to_dict() for v in o.views],
                }
            )
        meta = {
            "base_voxel": self.base_voxel,
            "sim_threshold": self.sim_threshold,
            "strategy": self.strategy,
            "refilter": self.refilter,
            "require_overlap": self.require_overlap,
            "keep_crops": self.keep_crops,
            "next_id": self.next_id,
            "frames_seen": self.frames_seen,
            "objects": objs,
        }
        (root / "objects.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dir(cls, path) -> "ObjectMap":
        root = Path(path)
        meta = json.loads((root / "objects.json").read_text())
        m = cls(
            meta["base_voxel"], meta["sim_threshold"], strategy=meta["strategy"],
            refilter=meta["refilter"], require_overlap=meta["require_overlap"], keep_crops=meta["keep_crops"],
        )
        m.next_id = int(meta["next_id"])
        m.frames_seen = int(meta.get("frames_seen", 0))
        for d in meta["objects"]:
            views = [ViewRecord.from_dict(v) for v in d["views"]]
            crops = {}
            for v in views:
                if v.crop:
                    crops[v.frame_index] = np.asarray(Image.open(root / v.crop).convert("RGB"))
            m.objects.append(
                GlobalObject(
                    id=int(d["id"]),
                    embedding=np.asarray(d["embedding"], dtype=np.float64),
                    raw_embedding=np.asarray(d["raw_embedding"], dtype=np.float64),
                    cloud=geo.load_cloud(root / d["cloud"]),
                    n=int(d["n"]),
                    views=views,
                    camera_position_sum=np.asarray(d["camera_position_sum"], dtype=np.float64),
                    crops=crops,
                )
            )
        return m


# --- similarity ---------------------------------------------------------------


def semantic_similarity(f_local, f_global) -> float:
    a = np.asarray(f_local, dtype=np.float64).reshape(-1)
    b = np.asarray(f_global, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"embedding dimensions differ: {a.size} vs {b.size}")
    # unit inputs can overshoot |dot| = 1 by an ulp
    return min(1.0, max(0.0, float(np.dot(a, b)) / 2.0 + 0.5))


def spatial_similarity(p_local: PointCloud, p_global, base: float, threshold: Optional[float] = None) -> float:
    """Dynamic NN ratio of the local cloud against the global one.

    ``p_global`` may be a ``(cloud, index)`` pair to reuse a built index.
    """
    cloud, index = p_global if isinstance(p_global, tuple) else (p_global, None)
    if threshold is None:
        threshold = geo.dynamic_nn_threshold(p_local, cloud, base)
    return geo.nn_ratio(p_local, index if index is not None else cloud, threshold)


def fusion_similarity(local: LocalObject, glob: GlobalObject, base: float) -> float:
    return semantic_similarity(local.embedding, glob.embedding) + spatial_similarity(local.cloud, glob.cloud, base)


class _Snapshot:
    """Frame-start view of one global object with a lazily built index."""

    __slots__ = ("obj", "box", "_index")

    def __init__(self, obj: GlobalObject):
        self.obj = obj
        self.box = geo.bbox(obj.cloud)
        self._index = None

    @property
    def index(self) -> SpatialIndex:
        if self._index is None:
            self._index = SpatialIndex(self.obj.cloud)
        return self._index


def _theta_row(local: LocalObject, snaps: list, omap: ObjectMap) -> tuple[np.ndarray, np.ndarray]:
    sem = np.empty(len(snaps))
    spa = np.zeros(len(snaps))
    lbox = geo.bbox(local.cloud)
    for j, s in enumerate(snaps):
        sem[j] = semantic_similarity(local.embedding, s.obj.embedding)
        thr = omap.threshold_for(local.cloud, s.obj.cloud)
        # every cross distance is at least the box gap, so the ratio is 0 without a query
        if lbox.gap(s.box) <= thr:
            spa[j] = geo.nn_ratio(local.cloud, s.index, thr)
    return sem, spa


def _pick(sem: np.ndarray, spa: np.ndarray, ids: list, omap: ObjectMap) -> Optional[int]:
    theta = sem + spa
    ok = theta > omap.sim_threshold
    if omap.require_overlap:
        ok &= spa > 0
    if not ok.any():
        return None
    best = np.max(theta[ok])
    return min(ids[j] for j in np.flatnonzero(ok & (theta == best)))


def match_object(local: LocalObject, omap: ObjectMap) -> Optional[int]:
    """Id of the best-matching global object, or None when nothing clears the threshold."""
    if not omap.objects:
        return None
    snaps = [_Snapshot(o) for o in omap.objects]
    sem, spa = _theta_row(local, snaps, omap)
    return _pick(sem, spa, [o.id for o in omap.objects], omap)


# --- fusion -------------------------------------------------------------------


def downsample_local(local: LocalObject, omap: ObjectMap) -> LocalObject:
    voxel = omap.voxel_for(local.cloud)
    cloud = geo.voxel_downsample(local.cloud, voxel)
    return LocalObject(
        embedding=local.embedding, cloud=cloud, mask=local.mask, crop=local.crop,
        frame_index=local.frame_index, camera_position=local.camera_position,
        points_in=local.points_in or len(local.cloud),
    )


def _retain_crop(obj: GlobalObject, local: LocalObject, keep: int) -> Optional[str]:
    if keep <= 0 or local.crop is None:
        return None
    ref = f"crops/{obj.id:04d}/{local.frame_index:06d}.png"
    obj.crops[local.frame_index] = local.crop
    record = ViewRecord(local.frame_index, local.confidence, ref, np.asarray(local.camera_position, dtype=np.float64))
    obj.views.append(record)
    kept = {v.frame_index for v in obj.best_views(keep)}
    for v in obj.views:
        if v.crop and v.frame_index not in kept:
            obj.crops.pop(v.frame_index, None)
            v.crop = None
    return ref


def new_global(local: LocalObject, oid: int, keep_crops: int = 5) -> GlobalObject:
    emb = np.asarray(local.embedding, dtype=np.float64).copy()
    obj = GlobalObject(
        id=oid, embedding=unit(emb), raw_embedding=emb, cloud=local.cloud,
        n=1, camera_position_sum=np.asarray(local.camera_position, dtype=np.float64).copy(),
    )
    if _retain_crop(obj, local, keep_crops) is None:
        obj.views.append(ViewRecord(local.frame_index, local.confidence, None, np.asarray(local.camera_position, dtype=np.float64)))
    return obj


def fuse(local: LocalObject, obj: GlobalObject, omap: Optional[ObjectMap] = None) -> GlobalObject:
    """Fold ``local`` into ``obj`` in place and return it.

    ``raw_embedding`` is the exact running mean; ``embedding`` is its unit copy.
    With ``omap.refilter`` the merged cloud is downsampled again at its own
    voxel size; without a map the union is kept as is.
    """
    n = obj.n
    obj.raw_embedding = (n * obj.raw_embedding + np.asarray(local.embedding, dtype=np.float64)) / (n + 1)
    obj.embedding = unit(obj.raw_embedding)
    merged = PointCloud.concat([obj.cloud, local.cloud])
    if omap is not None and omap.refilter:
        merged = geo.voxel_downsample(merged, omap.voxel_for(merged))
    obj.cloud = merged
    obj.n = n + 1
    obj.camera_position_sum = obj.camera_position_sum + np.asarray(local.camera_position, dtype=np.float64)
    keep = omap.keep_crops if omap is not None else 5
    if _retain_crop(obj, local, keep) is None:
        obj.views.append(ViewRecord(local.frame_index, local.confidence, None, np.asarray(local.camera_position, dtype=np.float64)))
    return obj


def integrate_frame(omap: ObjectMap, locals_: list) -> ObjectMap:
    """Match every local against the frame-start map, then apply fusions and insertions in order.

    Locals are expected to be downsampled already (see :func:`downsample_local`).
    """
    snaps = [_Snapshot(o) for o in omap.objects]
    ids = [o.id for o in omap.objects]
    targets = []
    for local in locals_:
        if snaps:
            sem, spa = _theta_row(local, snaps, omap)
            targets.append(_pick(sem, spa, ids, omap))
        else:
            targets.append(None)
    by_id = {o.id: o for o in omap.objects}
    for local, target in zip(locals_, targets):
        if target is None:
            obj = new_global(local, omap.next_id, omap.keep_crops)
            omap.objects.append(obj)
            omap.next_id += 1
        else:
            fuse(local, by_id[target], omap)
    omap.frames_seen += 1
    return omap


@dataclass
class FrameStats:
    frame_index: int
    detections: int
    points_in: int
    points_kept: int
    seconds: float
    integrate_seconds: float
    objects_after: int


def map_frames(omap: ObjectMap, frames: Iterable, seg, emb, *, min_points: int = 16, max_depth: float = 10.0, erode: bool = True) -> list[FrameStats]:
    """Run extraction, downsampling and fusion over a frame stream.

    ``seconds`` covers downsampling plus fusion; provider calls are excluded.
    """
    from .ingest import extract_local_objects

    stats = []
    for frame in frames:
        locals_ = extract_local_objects(frame, seg, emb, min_points=min_points, max_depth=max_depth, erode=erode)
        t0 = time.perf_counter()
        down = [downsample_local(lo, omap) for lo in locals_]
        t1 = time.perf_counter()
        integrate_frame(omap, down)
        t2 = time.perf_counter()
        st = FrameStats(
            frame_index=frame.index,
            detections=len(locals_),
            points_in=sum(len(lo.cloud) for lo in locals_),
            points_kept=sum(len(lo.cloud) for lo in down),
            seconds=t2 - t0,
            integrate_seconds=t2 - t1,
            objects_after=len(omap),
        )
        log.info(
            "event=frame_integrated frame=%d detections=%d objects=%d seconds=%.4f",
            st.frame_index, st.detections, st.objects_after, st.seconds,
        )
        stats.append(st)
    return stats
