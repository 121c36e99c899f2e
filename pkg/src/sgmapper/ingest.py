"""Posed RGB-D sequence loading, masked back-projection and per-frame local objects."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import PointCloud
from .providers.base import ProviderError

log = logging.getLogger(__name__)


class SequenceError(ValueError):
    """Dataset layout problem, tagged with the offending frame index when known."""

    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message if index is None else f"frame {index}: {message}")
        self.index = index


class DegenerateMask(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1.0

    def __post_init__(self):
        problems = []
        if not (self.fx > 0 and self.fy > 0):
            problems.append("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            problems.append("principal point outside image")
        if not self.depth_scale > 0:
            problems.append("depth_scale must be positive")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_json(cls, path) -> "CameraIntrinsics":
        d = json.loads(Path(path).read_text())
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            depth_scale=float(d.get("depth_scale", 1.0)),
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height, "depth_scale": self.depth_scale,
        }


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise ValueError("last row of a pose must be [0 0 0 1]")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass
class Frame:
    color: np.ndarray  # H x W x 3 uint8
    depth: np.ndarray  # H x W raw units
    pose: Pose
    intrinsics: CameraIntrinsics
    index: int

    def __post_init__(self):
        h, w = self.intrinsics.height, self.intrinsics.width
        if self.color.shape[:2] != (h, w) or self.depth.shape[:2] != (h, w):
            raise SequenceError(
                f"image size {self.color.shape[:2]}/{self.depth.shape[:2]} does not match intrinsics {(h, w)}",
                self.index,
            )

    @property
    def depth_m(self) -> np.ndarray:
        return self.depth.astype(np.float64) * self.intrinsics.depth_scale


@dataclass
class Mask:
    bitmap: np.ndarray
    confidence: float = 1.0

    def __post_init__(self):
        self.bitmap = np.asarray(self.bitmap, dtype=bool)
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"mask confidence {self.confidence} outside [0, 1]")

    @property
    def area(self) -> int:
        return int(self.bitmap.sum())


@dataclass
class LocalObject:
    embedding: np.ndarray
    cloud: PointCloud
    mask: Mask
    crop: np.ndarray
    frame_index: int
    camera_position: np.ndarray
    points_in: int = field(default=0)

    @property
    def confidence(self) -> float:
        return self.mask.confidence


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0:
        raise ValueError("cannot normalise a zero or non-finite vector")
    return v / n


# --- dataset layout ------------------------------------------------------------


def read_trajectory(path) -> list[np.ndarray]:
    mats = []
    for lineno, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        vals = line.split()
        if len(vals) != 16:
            raise SequenceError(f"traj line {lineno + 1} has {len(vals)} values, expected 16", len(mats))
        mats.append(np.array([float(v) for v in vals]).reshape(4, 4))
    return mats


def _indexed_files(directory: Path) -> dict[int, Path]:
    out = {}
    if directory.is_dir():
        for p in directory.glob("*.png"):
            if p.stem.isdigit():
                out[int(p.stem)] = p
    return out


def load_sequence(path) -> Iterator[Frame]:
    """Yield frames of a Replica-style directory in index order.

    Layout: ``color/%06d.png``, ``depth/%06d.png`` (16-bit), ``traj.txt``
    (row-major 4x4 camera-to-world per line) and ``intrinsics.json``.
    The whole layout is checked before the first frame is yielded.
    """
    root = Path(path)
    if not (root / "intrinsics.json").is_file():
        raise SequenceError(f"{root}: missing intrinsics.json")
    if not (root / "traj.txt").is_file():
        raise SequenceError(f"{root}: missing traj.txt")
    intr = CameraIntrinsics.from_json(root / "intrinsics.json")
    mats = read_trajectory(root / "traj.txt")
    colors = _indexed_files(root / "color")
    depths = _indexed_files(root / "depth")
    n = max(len(mats), max(colors, default=-1) + 1, max(depths, default=-1) + 1)
    poses = []
    for i in range(n):
        if i >= len(mats):
            raise SequenceError("no pose in traj.txt", i)
        if i not in colors:
            raise SequenceError("missing color image", i)
        if i not in depths:
            raise SequenceError("missing depth image", i)
        try:
            poses.append(Pose.from_matrix(mats[i]))
        except ValueError as exc:
            raise SequenceError(str(exc), i) from exc
    return _iter_frames(colors, depths, poses, intr)


def _iter_frames(colors, depths, poses, intr) -> Iterator[Frame]:
    for i, pose in enumerate(poses):
        color = np.asarray(Image.open(colors[i]).convert("RGB"))
        depth = np.asarray(Image.open(depths[i]))
        yield Frame(color=color, depth=depth, pose=pose, intrinsics=intr, index=i)


def count_frames(path) -> int:
    return len(read_trajectory(Path(path) / "traj.txt"))


def write_frame(root, frame: Frame) -> None:
    root = Path(root)
    (root / "color").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    Image.fromarray(frame.color.astype(np.uint8)).save(root / "color" / f"{frame.index:06d}.png")
    Image.fromarray(frame.depth.astype(np.uint16)).save(root / "depth" / f"{frame.index:06d}.png")


def write_sequence_meta(root, intrinsics: CameraIntrinsics, poses) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "intrinsics.json").write_text(json.dumps(intrinsics.to_dict(), indent=2, sort_keys=True))
    lines = [" ".join(repr(float(v)) for v in p.matrix.reshape(-1)) for p in poses]
    (root / "traj.txt").write_text("\n".join(lines) + "\n")


# --- back-projection -------------------------------------------------------------


def backproject(
    frame: Frame, mask: Mask, *, min_points: int = 16, max_depth: float = 10.0
) -> PointCloud:
    """World-frame points for every masked pixel with valid depth.

    ``X_world = R (d K^-1 [u, v, 1]^T) + t`` with pixel centres at integer
    coordinates. Depth is invalid when the raw value is 0 or the metric depth
    exceeds ``max_depth``.
    """
    bitmap = np.asarray(mask.bitmap, dtype=bool)
    if bitmap.shape != frame.depth.shape[:2]:
        raise ValueError(f"mask shape {bitmap.shape} does not match frame {frame.depth.shape[:2]}")
    v, u = np.nonzero(bitmap)
    raw = frame.depth[v, u]
    d = raw.astype(np.float64) * frame.intrinsics.depth_scale
    ok = (raw > 0) & np.isfinite(d) & (d <= max_depth)
    if np.count_nonzero(ok) < max(min_points, 1):
        raise DegenerateMask(f"degenerate mask: {np.count_nonzero(ok)} valid pixels (< {min_points})")
    u, v, d = u[ok], v[ok], d[ok]
    intr = frame.intrinsics
    cam = np.stack([(u - intr.cx) / intr.fx * d, (v - intr.cy) / intr.fy * d, d], axis=1)
    world = cam @ frame.pose.rotation.T + frame.pose.translation
    colors = frame.color[v, u, :3].astype(np.float64) / 255.0
    return PointCloud(world, colors)


def project(points, pose: Pose, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of world points to (u, v, depth)."""
    cam = (np.asarray(points, dtype=np.float64) - pose.translation) @ pose.rotation
    z = cam[:, 2]
    return np.stack([intrinsics.fx * cam[:, 0] / z + intrinsics.cx, intrinsics.fy * cam[:, 1] / z + intrinsics.cy, z], axis=1)


def mask_crop(image: np.ndarray, bitmap: np.ndarray, pad: int = 0) -> np.ndarray:
    """Bounding-box crop of ``image`` with pixels outside the mask blacked out."""
    rows = np.flatnonzero(bitmap.any(axis=1))
    cols = np.flatnonzero(bitmap.any(axis=0))
    r0, r1 = max(rows[0] - pad, 0), min(rows[-1] + pad + 1, bitmap.shape[0])
    c0, c1 = max(cols[0] - pad, 0), min(cols[-1] + pad + 1, bitmap.shape[1])
    crop = image[r0:r1, c0:c1].copy()
    crop[~bitmap[r0:r1, c0:c1]] = 0
    return crop


def extract_local_objects(
    frame: Frame,
    seg,
    emb,
    *,
    min_points: int = 16,
    max_depth: float = 10.0,
    erode: bool = True,
) -> list[LocalObject]:
    """Segment, embed and back-project one frame. Degenerate masks are dropped."""
    try:
        masks = seg.segment(frame.color, frame_index=frame.index)
    except ProviderError:
        raise
    except Exception as exc:
        raise ProviderError(f"segmentation failed on frame {frame.index}: {exc}") from exc

    out = []
    for mask in masks:
        bitmap = mask.bitmap
        if erode:
            bitmap = ndimage.binary_erosion(bitmap)
        if not bitmap.any():
            continue
        used = Mask(bitmap, mask.confidence)
        try:
            cloud = backproject(frame, used, min_points=min_points, max_depth=max_depth)
        except DegenerateMask:
            log.debug("frame=%d dropped degenerate mask area=%d", frame.index, used.area)
            continue
        try:
            vec = emb.embed_image_region(frame.color, mask.bitmap)
        except ProviderError:
            raise
        except Exception as exc:
            raise ProviderError(f"embedding failed on frame {frame.index}: {exc}") from exc
        out.append(
            LocalObject(
                embedding=unit(vec),
                cloud=cloud,
                mask=used,
                crop=mask_crop(frame.color, mask.bitmap),
                frame_index=frame.index,
                camera_position=frame.pose.translation.copy(),
                points_in=len(cloud),
            )
        )
    return out
