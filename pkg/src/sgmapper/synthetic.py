"""Ray-cast box scenes written in the dataset layout, with a matching mock manifest.

Each object is a flat-coloured axis-aligned box. Frames come from an orbiting
camera; per-pixel instance ids double as the mock segmentation output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import geometry as geo
from .ingest import CameraIntrinsics, Frame, Pose, write_frame, write_sequence_meta

RESHOT_BACKGROUND = (255, 255, 255)


@dataclass
class Box:
    name: str
    lo: tuple
    hi: tuple
    color: tuple
    caption: str
    background: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.lo, dtype=float) + np.asarray(self.hi, dtype=float)) / 2


@dataclass
class Scene:
    boxes: list
    target: tuple
    radius: float
    height: float
    arc: float
    width: int
    height_px: int
    hfov: float
    frames: int
    synonym_cos: float = 0.9


def default_scene(frames: int = 20) -> Scene:
    boxes = [
        Box("floor", (-2.0, -2.0, -0.02), (2.0, 2.0, 0.0), (120, 120, 120), "a grey floor", True),
        Box("wall", (-2.0, 2.0, 0.0), (2.0, 2.1, 2.5), (200, 190, 160), "a beige wall", True),
        Box("table", (-0.6, -0.4, 0.0), (0.6, 0.4, 0.75), (139, 90, 43), "a wooden table"),
        Box("vase", (0.1, -0.075, 0.75), (0.25, 0.075, 1.05), (30, 60, 200), "a blue vase",
            extra={"reshot_caption": "a blue bottle", "reshot_cos": 0.7, "refined": "a blue ceramic vase"}),
        Box("chair", (-1.3, -0.25, 0.0), (-0.8, 0.25, 0.9), (200, 40, 40), "a red chair",
            extra={"reshot_caption": "a red stool", "reshot_cos": 0.8}),
    ]
    return Scene(boxes, (0.0, 0.0, 0.5), 2.8, 1.6, math.radians(90), 160, 120, 60.0, frames)


def bench_scene(frames: int = 10) -> Scene:
    """A 12 m wall and a 12 m floor dominate; small props keep the map busy."""
    boxes = [
        Box("floor", (-6.0, -6.0, -0.05), (6.0, 6.0, 0.0), (120, 120, 120), "a grey floor", True),
        Box("wall", (-6.0, 3.0, 0.0), (6.0, 3.2, 3.0), (200, 190, 160), "a beige wall", True),
        Box("table", (-0.6, -0.4, 0.0), (0.6, 0.4, 0.75), (139, 90, 43), "a wooden table"),
        Box("vase", (0.1, -0.075, 0.75), (0.25, 0.075, 1.05), (30, 60, 200), "a blue vase"),
        Box("chair", (-1.3, -0.25, 0.0), (-0.8, 0.25, 0.9), (200, 40, 40), "a red chair"),
    ]
    return Scene(boxes, (0.0, 1.5, 0.8), 4.0, 1.8, math.radians(40), 640, 480, 60.0, frames)


SCENES = {"default": default_scene, "bench": bench_scene}


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=float))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return Pose(np.stack([right, down, fwd], axis=1), eye)


def orbit_poses(scene: Scene) -> list[Pose]:
    tx, ty, _ = scene.target
    out = []
    n = scene.frames
    for i in range(n):
        a = -scene.arc / 2 + (scene.arc * i / (n - 1) if n > 1 else scene.arc / 2)
        # the orbit starts in front of the wall, looking towards +y
        eye = (tx + scene.radius * math.sin(a), ty - scene.radius * math.cos(a), scene.height)
        out.append(look_at(eye, scene.target))
    return out


def intrinsics_for(scene: Scene) -> CameraIntrinsics:
    fx = (scene.width / 2.0) / math.tan(math.radians(scene.hfov) / 2.0)
    return CameraIntrinsics(fx, fx, (scene.width - 1) / 2.0, (scene.height_px - 1) / 2.0, scene.width, scene.height_px, 0.001)


def raycast(boxes: list, origin, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit parameter and box index (-1 for a miss) per ray, slab method."""
    o = np.asarray(origin, dtype=float)
    t_best = np.full(len(dirs), np.inf)
    hit = np.full(len(dirs), -1, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    for k, b in enumerate(boxes):
        lo, hi = np.asarray(b.lo, dtype=float), np.asarray(b.hi, dtype=float)
        with np.errstate(invalid="ignore"):
            t1 = (lo - o) * inv
            t2 = (hi - o) * inv
        t1 = np.where(np.isnan(t1), -np.inf, t1)
        t2 = np.where(np.isnan(t2), np.inf, t2)
        tnear = np.minimum(t1, t2).max(axis=1)
        tfar = np.maximum(t1, t2).min(axis=1)
        ok = (tnear <= tfar) & (tfar > 0) & (tnear > 1e-9) & (tnear < t_best)
        t_best[ok] = tnear[ok]
        hit[ok] = k
    return t_best, hit


def render(scene: Scene, intr: CameraIntrinsics, pose: Pose):
    """Colour, 16-bit depth and instance ids (box index + 1, 0 for empty)."""
    v, u = np.mgrid[0 : intr.height, 0 : intr.width]
    cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u, dtype=float)], axis=-1).reshape(-1, 3)
    dirs = cam @ pose.rotation.T
    t, hit = raycast(scene.boxes, pose.translation, dirs)
    color = np.zeros((len(dirs), 3), dtype=np.uint8)
    depth = np.zeros(len(dirs), dtype=np.uint16)
    ok = hit >= 0
    palette = np.array([b.color for b in scene.boxes], dtype=np.uint8)
    color[ok] = palette[hit[ok]]
    # t along an unnormalised ray with unit camera z is the z-depth
    depth[ok] = np.clip(np.rint(t[ok] / intr.depth_scale), 1, 65535).astype(np.uint16)
    ids = np.where(ok, hit + 1, 0).astype(np.uint16)
    shape = (intr.height, intr.width)
    return color.reshape(shape + (3,)), depth.reshape(shape), ids.reshape(shape)


def surface_samples(box: Box, spacing: float) -> np.ndarray:
    lo, hi = np.asarray(box.lo, dtype=float), np.asarray(box.hi, dtype=float)
    pts = []
    for axis in range(3):
        a, b = [i for i in range(3) if i != axis]
        na = max(2, int(math.ceil((hi[a] - lo[a]) / spacing)) + 1)
        nb = max(2, int(math.ceil((hi[b] - lo[b]) / spacing)) + 1)
        ga, gb = np.meshgrid(np.linspace(lo[a], hi[a], na), np.linspace(lo[b], hi[b], nb), indexing="ij")
        for value in (lo[axis], hi[axis]):
            p = np.empty((ga.size, 3))
            p[:, a], p[:, b], p[:, axis] = ga.ravel(), gb.ravel(), value
            pts.append(p)
    return np.unique(np.concatenate(pts), axis=0)


def expected_captions(scene: Scene) -> dict:
    """Final captions the mock pipeline should produce for each box.

    Background boxes keep their caption. Foreground boxes are ranked by the
    uncertainty their re-shot caption implies; the upper half is refined.
    """
    fg = [(k, b) for k, b in enumerate(scene.boxes) if not b.background]
    unc = {k: (1.0 - b.extra.get("reshot_cos", 1.0)) if "reshot_caption" in b.extra else 0.0 for k, b in fg}
    ranked = sorted(unc, key=lambda k: (unc[k], k))
    high = set(ranked[math.ceil(len(ranked) / 2) :])
    out = {}
    for k, b in enumerate(scene.boxes):
        out[k + 1] = b.extra.get("refined", b.caption) if k in high else b.caption
    return out


def generate(root, scene: str | Scene = "default", frames: Optional[int] = None, gt_spacing: float = 0.05) -> Path:
    """Write a full synthetic dataset (frames, masks, mock manifest, GT) under ``root``."""
    root = Path(root)
    if isinstance(scene, str):
        scene = SCENES[scene](frames) if frames is not None else SCENES[scene]()
    intr = intrinsics_for(scene)
    poses = orbit_poses(scene)
    write_sequence_meta(root, intr, poses)
    (root / "masks").mkdir(parents=True, exist_ok=True)

    areas = []
    for i, pose in enumerate(poses):
        color, depth, ids = render(scene, intr, pose)
        write_frame(root, Frame(color, depth, pose, intr, i))
        Image.fromarray(ids).save(root / "masks" / f"{i:06d}.png")
        areas.append(np.bincount(ids.ravel(), minlength=len(scene.boxes) + 1))
    areas = np.array(areas)
    peak = np.maximum(areas.max(axis=0), 1)
    listing = {}
    for i in range(len(poses)):
        listing[str(i)] = [
            {"instance": k, "confidence": round(0.5 + 0.49 * float(areas[i, k]) / float(peak[k]), 4)}
            for k in range(1, len(scene.boxes) + 1)
            if areas[i, k] > 0
        ]

    synonyms, aliases, palette = {}, {}, []
    for k, b in enumerate(scene.boxes):
        entry = {"instance": k + 1, "name": b.name, "color": list(b.color), "caption": b.caption, "background": b.background}
        for key in ("reshot_caption", "refined"):
            if key in b.extra:
                entry[key] = b.extra[key]
        palette.append(entry)
        synonyms[b.name] = [b.caption, scene.synonym_cos]
        aliases[b.name] = [b.name]
        if "reshot_caption" in b.extra:
            synonyms[b.extra["reshot_caption"]] = [b.caption, b.extra.get("reshot_cos", 0.9)]
    manifest = {
        "dim": 512,
        "seed": 0,
        "palette": palette,
        "synonyms": synonyms,
        "aliases": aliases,
        "reshot_background": list(RESHOT_BACKGROUND),
        "frames": listing,
        "expected_captions": {str(k): v for k, v in expected_captions(scene).items()},
        "instances": len(scene.boxes),
    }
    (root / "mock_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    pts, labels = [], []
    for k, b in enumerate(scene.boxes):
        s = surface_samples(b, gt_spacing)
        pts.append(s)
        labels.append(np.full(len(s), k, dtype=np.int32))
    gt = geo.PointCloud(np.concatenate(pts))
    geo.write_ply(root / "gt.ply", gt, extra={"label": np.concatenate(labels)})
    (root / "classes.txt").write_text("\n".join(b.name for b in scene.boxes) + "\n")
    return root
