"""Best-view re-shot rendering of fused object clouds.

Candidate cameras sit on a Fibonacci-spiral hemisphere above the object.
Each is scored by hidden-point-removal visibility, uprightness and agreement
with the prior direction, and the winner is rendered as a z-buffered point
splat.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy.spatial import ConvexHull
from scipy.spatial import QhullError

from . import geometry as geo
from .geometry import PointCloud

log = logging.getLogger(__name__)

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


@dataclass(frozen=True)
class RenderSettings:
    width: int = 256
    height: int = 256
    fov: float = 60.0
    splat_radius: int = 2
    background: tuple = (255, 255, 255)
    gravity: tuple = (0.0, 0.0, -1.0)
    candidates: int = 64
    radius_multiplier: float = 1.5
    alpha: float = 0.2
    beta: float = 0.2
    gamma: float = 100.0
    margin: float = 0.1
    max_hpr_points: Optional[int] = 4000

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or not self.alpha + self.beta < 1:
            raise ValueError("alpha, beta must be >= 0 with alpha+beta < 1")
        if self.candidates < 1:
            raise ValueError("candidates must be >= 1")
        if self.width < 1 or self.height < 1 or self.splat_radius < 0:
            raise ValueError("bad image size or splat radius")
        if not 0 < self.fov < 180:
            raise ValueError("fov must lie in (0, 180)")

    @property
    def g(self) -> np.ndarray:
        return _normalize(np.asarray(self.gravity, dtype=np.float64))


@dataclass
class ViewCandidate:
    index: int
    position: np.ndarray
    direction: np.ndarray
    s_vis: float
    s_up: float
    s_prior: float
    s_view: float

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "position": [float(v) for v in self.position],
            "direction": [float(v) for v in self.direction],
            "s_vis": self.s_vis,
            "s_up": self.s_up,
            "s_prior": self.s_prior,
            "s_view": self.s_view,
        }


@dataclass
class ReshotImage:
    pixels: np.ndarray
    candidate: ViewCandidate
    object_id: int
    foreground: np.ndarray = field(repr=False, default=None)


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("zero-length vector")
    return v / n


def _basis(up: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors completing ``up`` to a right-handed frame."""
    helper = np.zeros(3)
    helper[int(np.argmin(np.abs(up)))] = 1.0
    e1 = _normalize(np.cross(helper, up))
    return e1, np.cross(up, e1)


def sample_hemisphere(center, radius: float, n: int, g=(0.0, 0.0, -1.0)) -> np.ndarray:
    """``n`` camera positions on the upper hemisphere (the ``-g`` side), zenith first."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    if n < 1:
        raise ValueError("need at least one sample")
    up = -_normalize(np.asarray(g, dtype=np.float64))
    e1, e2 = _basis(up)
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * GOLDEN_ANGLE
    dirs = (r * np.cos(phi))[:, None] * e1 + (r * np.sin(phi))[:, None] * e2 + z[:, None] * up
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return np.asarray(center, dtype=np.float64) + radius * dirs


def hpr_visible(points: np.ndarray, camera, gamma: float = 100.0) -> np.ndarray:
    """Boolean visibility mask by spherical flipping and a convex hull."""
    pts = np.asarray(points, dtype=np.float64) - np.asarray(camera, dtype=np.float64)
    n = len(pts)
    if n <= 3:
        return np.ones(n, dtype=bool)
    norms = np.linalg.norm(pts, axis=1)
    if np.any(norms == 0):
        raise ValueError("camera coincides with a point")
    R = gamma * norms.max()
    flipped = pts + 2.0 * (R - norms)[:, None] * pts / norms[:, None]
    hull_input = np.vstack([flipped, np.zeros((1, 3))])
    try:
        hull = ConvexHull(hull_input)
    except QhullError:
        hull = ConvexHull(hull_input, qhull_options="QJ")
    vis = np.zeros(n, dtype=bool)
    verts = hull.vertices[hull.vertices < n]
    vis[verts] = True
    return vis


def _hpr_subset(cloud: PointCloud, limit: Optional[int]) -> np.ndarray:
    pts = cloud.points
    if limit is not None and len(pts) > limit:
        step = int(math.ceil(len(pts) / limit))
        pts = pts[::step]
    return pts


def visible_ratio(cloud: PointCloud, camera, gamma: float = 100.0, max_points: Optional[int] = None) -> float:
    box = geo.bbox(cloud)
    if box.contains(camera):
        raise ValueError("camera inside object")
    pts = _hpr_subset(cloud, max_points)
    return float(np.count_nonzero(hpr_visible(pts, camera, gamma))) / len(pts)


def view_scores(
    cloud: PointCloud,
    position,
    g,
    prior_dir,
    alpha: float,
    beta: float,
    *,
    center=None,
    gamma: float = 100.0,
    max_points: Optional[int] = None,
    index: int = 0,
    s_vis: Optional[float] = None,
) -> ViewCandidate:
    """Score one camera position.

    ``prior_dir`` is the unnormalised ``v_avg - o``; a zero vector gives the
    neutral prior score 0.5. ``s_vis`` may be supplied to skip the hull.
    """
    c = np.asarray(position, dtype=np.float64)
    o = geo.centroid(cloud) if center is None else np.asarray(center, dtype=np.float64)
    v = _normalize(o - c)
    gn = _normalize(np.asarray(g, dtype=np.float64))
    s_up = 1.0 - abs(float(np.dot(v, gn)))
    f = np.asarray(prior_dir, dtype=np.float64)
    fn = float(np.linalg.norm(f))
    if fn == 0.0:
        log.debug("event=degenerate_prior candidate=%d", index)
        s_prior = 0.5
    else:
        s_prior = 0.5 * (1.0 + float(np.dot(v, f / fn)))
    s_up = min(1.0, max(0.0, s_up))
    s_prior = min(1.0, max(0.0, s_prior))
    if s_vis is None:
        s_vis = visible_ratio(cloud, c, gamma, max_points)
    s_view = (1.0 - alpha - beta) * s_vis + alpha * s_up + beta * s_prior
    return ViewCandidate(index, c, v, float(s_vis), s_up, s_prior, float(s_view))


def score_candidates(cloud: PointCloud, average_camera, settings: RenderSettings) -> list[ViewCandidate]:
    box = geo.bbox(cloud)
    o = geo.centroid(cloud)
    diag = geo.bbox_diagonal(box)
    radius = settings.radius_multiplier * diag if diag > 0 else settings.radius_multiplier
    positions = sample_hemisphere(o, radius, settings.candidates, settings.gravity)
    prior = np.asarray(average_camera, dtype=np.float64) - o
    pts = _hpr_subset(cloud, settings.max_hpr_points)
    out = []
    for i, c in enumerate(positions):
        if box.contains(c):
            continue
        s_vis = float(np.count_nonzero(hpr_visible(pts, c, settings.gamma))) / len(pts)
        out.append(
            view_scores(cloud, c, settings.gravity, prior, settings.alpha, settings.beta, center=o, index=i, s_vis=s_vis)
        )
    if not out:
        raise ValueError("every candidate camera lies inside the object box")
    return out


def best_candidate(cands: list[ViewCandidate]) -> ViewCandidate:
    """Highest S_view; the lowest candidate index wins ties."""
    return min(cands, key=lambda c: (-c.s_view, c.index))


def rank_candidates(cands: list[ViewCandidate]) -> list[ViewCandidate]:
    return sorted(cands, key=lambda c: (-c.s_view, c.index))


def select_best_view(obj, settings: RenderSettings) -> ViewCandidate:
    """Best candidate for a :class:`~sgmapper.fusion.GlobalObject`."""
    return best_candidate(score_candidates(obj.cloud, obj.average_camera, settings))


# --- rendering ------------------------------------------------------------------


def _camera_frame(direction: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Rows are the camera x (right), y (down) and z (forward) axes in world coordinates."""
    fwd = _normalize(direction)
    up = -g - np.dot(-g, fwd) * fwd
    if np.linalg.norm(up) < 1e-9:
        e1, _ = _basis(fwd)
        up = e1
    up = _normalize(up)
    down = -up
    right = np.cross(down, fwd)
    return np.stack([right, down, fwd])


def _disc(radius: int) -> np.ndarray:
    r = int(radius)
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    keep = dx * dx + dy * dy <= r * r
    return np.stack([dx[keep], dy[keep]], axis=1)


def render_point_splat(cloud: PointCloud, candidate: ViewCandidate, settings: RenderSettings, object_id: int = -1) -> ReshotImage:
    """Perspective point-splat render with nearest-point-wins z-buffering.

    The focal length is fitted so the object's box corners fill the frame with
    the configured margin; a box with no extent falls back to the FOV.
    """
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    W, H = settings.width, settings.height
    rot = _camera_frame(candidate.direction, settings.g)
    c = np.asarray(candidate.position, dtype=np.float64)
    cam = (cloud.points - c) @ rot.T
    box = geo.bbox(cloud)
    corners = np.array([[x, y, z] for x in (box.min[0], box.max[0]) for y in (box.min[1], box.max[1]) for z in (box.min[2], box.max[2])])
    cc = (corners - c) @ rot.T
    cz = np.clip(cc[:, 2], 1e-9, None)
    sx = float(np.max(np.abs(cc[:, 0] / cz)))
    sy = float(np.max(np.abs(cc[:, 1] / cz)))
    half_w, half_h = (W / 2.0) / (1.0 + settings.margin), (H / 2.0) / (1.0 + settings.margin)
    limits = [half_w / sx if sx > 1e-12 else math.inf, half_h / sy if sy > 1e-12 else math.inf]
    f = min(limits)
    if not math.isfinite(f):
        f = (H / 2.0) / math.tan(math.radians(settings.fov) / 2.0)
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0

    img = np.empty((H, W, 3), dtype=np.uint8)
    img[:] = np.asarray(settings.background, dtype=np.uint8)
    fg = np.zeros((H, W), dtype=bool)

    front = cam[:, 2] > 1e-9
    idx = np.flatnonzero(front)
    z = cam[idx, 2]
    u = np.rint(f * cam[idx, 0] / z + cx).astype(np.int64)
    v = np.rint(f * cam[idx, 1] / z + cy).astype(np.int64)
    offs = _disc(settings.splat_radius)
    pu = (u[None, :] + offs[:, 0:1]).reshape(-1)
    pv = (v[None, :] + offs[:, 1:2]).reshape(-1)
    pz = np.broadcast_to(z, (len(offs), len(z))).reshape(-1)
    pi = np.broadcast_to(idx, (len(offs), len(idx))).reshape(-1)
    inside = (pu >= 0) & (pu < W) & (pv >= 0) & (pv < H)
    pu, pv, pz, pi = pu[inside], pv[inside], pz[inside], pi[inside]
    if len(pu):
        pix = pv * W + pu
        order = np.lexsort((pi, pz, pix))
        pix, pi = pix[order], pi[order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        pix, pi = pix[first], pi[first]
        if cloud.colors is not None:
            rgb = np.clip(np.rint(cloud.colors[pi] * 255.0), 0, 255).astype(np.uint8)
        else:
            rgb = np.full((len(pi), 3), 128, dtype=np.uint8)
        img.reshape(-1, 3)[pix] = rgb
        fg.reshape(-1)[pix] = True
    return ReshotImage(img, candidate, object_id, fg)


def write_reshot(root, shot: ReshotImage, rank: int, candidates: Optional[list] = None) -> Path:
    d = Path(root) / "reshots" / f"{shot.object_id:04d}"
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"rank{rank}.png"
    Image.fromarray(shot.pixels).save(path)
    side = {"object_id": shot.object_id, "rank": rank, "candidate": shot.candidate.to_dict()}
    if candidates is not None:
        side["candidates"] = [c.to_dict() for c in candidates]
    (d / f"rank{rank}.json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return path


def reshoot_object(obj, settings: RenderSettings, ranks: int = 1) -> tuple[list[ReshotImage], list[ViewCandidate]]:
    cands = score_candidates(obj.cloud, obj.average_camera, settings)
    ordered = rank_candidates(cands)
    shots = [render_point_splat(obj.cloud, c, settings, obj.id) for c in ordered[: max(1, ranks)]]
    return shots, cands
