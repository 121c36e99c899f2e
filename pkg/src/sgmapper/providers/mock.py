"""Deterministic offline stand-ins for the four model capabilities.

Everything here is a pure function of its inputs plus the scene manifest, so
two pipeline runs with these providers are byte-for-byte reproducible.

The mock manifest (``mock_manifest.json`` next to a synthetic dataset) holds::

    {"dim": 512, "seed": 0,
     "palette": [{"color": [r, g, b], "caption": "...", "background": false}, ...],
     "synonyms": {"text": ["anchor text", cosine], ...},
     "frames": {"0": [{"instance": 3, "confidence": 0.91}, ...], ...}}

and instance-id masks live in ``masks/%06d.png`` (16-bit).
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import re
from collections import Counter
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from ..ingest import Mask
from .base import ProviderError

BACKGROUND_MARKER = "yes or no"
REFINE_MARKER = "stitched from the point cloud image"
AGGREGATE_MARKER = "describe the same object from different views:"
ASSIGN_MARKER = "Which object is most likely a"


def _rgb24(pixels: np.ndarray) -> np.ndarray:
    p = pixels.reshape(-1, 3).astype(np.int64)
    return (p[:, 0] << 16) | (p[:, 1] << 8) | p[:, 2]


def dominant_entry(pixels: np.ndarray, palette: list[dict]) -> Optional[dict]:
    """Palette entry whose exact colour covers the most pixels (ties: palette order)."""
    if not palette or pixels.size == 0:
        return None
    codes = _rgb24(pixels)
    values, counts = np.unique(codes, return_counts=True)
    lookup = dict(zip(values.tolist(), counts.tolist()))
    best, best_count = None, 0
    for entry in palette:
        r, g, b = entry["color"]
        c = lookup.get((int(r) << 16) | (int(g) << 8) | int(b), 0)
        if c > best_count:
            best, best_count = entry, c
    return best


class MockSegmentationProvider:
    """Returns the manifest's masks for a frame; unlisted frames give []."""

    def __init__(self, frames: Optional[dict] = None, mask_dir=None, listing: Optional[dict] = None):
        self._frames = {int(k): v for k, v in (frames or {}).items()}
        self._mask_dir = Path(mask_dir) if mask_dir is not None else None
        self._listing = {int(k): v for k, v in (listing or {}).items()}

    @classmethod
    def from_fixture(cls, root) -> "MockSegmentationProvider":
        root = Path(root)
        manifest = json.loads((root / "mock_manifest.json").read_text())
        return cls(mask_dir=root / "masks", listing=manifest.get("frames", {}))

    def segment(self, image, frame_index: Optional[int] = None) -> list[Mask]:
        if frame_index is None:
            return []
        if frame_index in self._frames:
            return [copy.deepcopy(m) for m in self._frames[frame_index]]
        entries = self._listing.get(frame_index)
        if not entries or self._mask_dir is None:
            return []
        ids = np.asarray(Image.open(self._mask_dir / f"{frame_index:06d}.png"))
        out = []
        for e in sorted(entries, key=lambda e: e["instance"]):
            bitmap = ids == int(e["instance"])
            if bitmap.any():
                out.append(Mask(bitmap, float(e["confidence"])))
        return out


class MockEmbeddingProvider:
    """Hash-seeded unit vectors, with optional synonym pairs at a fixed cosine.

    ``synonyms`` maps ``text -> (anchor, cos)``: the text embeds to
    ``cos * e(anchor) + sin * u`` with ``u`` orthogonal to ``e(anchor)``.
    Image regions embed as the caption of their dominant palette colour.
    """

    def __init__(self, dim: int = 512, seed: int = 0, synonyms: Optional[dict] = None, palette: Optional[list] = None):
        self.dim = int(dim)
        self.seed = int(seed)
        self.synonyms = {k: (v[0], float(v[1])) for k, v in (synonyms or {}).items()}
        self.palette = list(palette or [])

    def _hash_vector(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\x00{text}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def embed_text(self, text: str, _depth: int = 0) -> np.ndarray:
        if text in self.synonyms and _depth < 8:
            anchor, cos = self.synonyms[text]
            a = self.embed_text(anchor, _depth + 1)
            u = self._hash_vector(text)
            u = u - np.dot(u, a) * a
            u /= np.linalg.norm(u)
            return cos * a + math.sqrt(max(0.0, 1.0 - cos * cos)) * u
        return self._hash_vector(text)

    def embed_image_region(self, image, mask) -> np.ndarray:
        pixels = np.asarray(image)[np.asarray(mask, dtype=bool)][..., :3]
        entry = dominant_entry(pixels, self.palette)
        if entry is not None:
            return self.embed_text(entry["caption"])
        if pixels.size == 0:
            return self._hash_vector("<empty region>")
        mean = tuple(int(v) // 16 for v in pixels.reshape(-1, 3).mean(axis=0))
        return self._hash_vector(f"<region {mean}>")


class MockCaptionProvider:
    """Captions an image by its dominant palette colour.

    Background prompts get ``yes``/``no`` from the palette's ``background``
    flag; refinement prompts return ``refined`` when the entry has one.
    Images containing the re-shot background colour are re-shots and get the
    entry's ``reshot_caption`` when present.
    """

    def __init__(self, palette: Optional[list] = None, default: str = "an object", reshot_background=None):
        self.palette = list(palette or [])
        self.default = default
        self.reshot_background = None if reshot_background is None else tuple(int(c) for c in reshot_background)
        self.calls = 0

    def _is_reshot(self, image: np.ndarray) -> bool:
        if self.reshot_background is None:
            return False
        return bool(np.all(image[..., :3] == np.asarray(self.reshot_background), axis=-1).any())

    def caption(self, image, prompt: str) -> str:
        self.calls += 1
        entry = dominant_entry(np.asarray(image)[..., :3], self.palette)
        if BACKGROUND_MARKER in prompt:
            return "yes" if entry is not None and entry.get("background") else "no"
        if entry is None:
            return self.default
        if REFINE_MARKER in prompt:
            return entry.get("refined", entry["caption"])
        if "reshot_caption" in entry and self._is_reshot(np.asarray(image)):
            return entry["reshot_caption"]
        return entry["caption"]


class MockReasonProvider:
    """Rule-based text completion for the pipeline's own templates."""

    def __init__(self, aliases: Optional[dict] = None, near_distance: float = 0.5, contact_tol: float = 0.05):
        self.aliases = {k.lower(): [a.lower() for a in v] for k, v in (aliases or {}).items()}
        self.near_distance = near_distance
        self.contact_tol = contact_tol
        self.calls = 0

    def complete(self, prompt: str) -> str:
        self.calls += 1
        if AGGREGATE_MARKER in prompt:
            return self._aggregate(prompt)
        if "\nPair: " in prompt or prompt.startswith("Pair: "):
            return self._relation(prompt)
        if ASSIGN_MARKER in prompt:
            return self._assign(prompt)
        raise ProviderError("mock reasoner: unrecognised prompt")

    def _aggregate(self, prompt: str) -> str:
        tail = prompt.split(AGGREGATE_MARKER, 1)[1]
        start = tail.index("[")
        captions, _ = json.JSONDecoder().raw_decode(tail[start:])
        if not captions:
            raise ProviderError("mock reasoner: no captions to aggregate")
        counts = Counter(captions)
        top = max(counts.values())
        return next(c for c in captions if counts[c] == top)

    def _relation(self, prompt: str) -> str:
        line = [l for l in prompt.splitlines() if l.startswith("Pair: ")][-1]
        pair = json.loads(line[len("Pair: "):])
        a, b = pair["a"], pair["b"]
        amin, amax = np.array(a["bbox_min"]), np.array(a["bbox_max"])
        bmin, bmax = np.array(b["bbox_min"]), np.array(b["bbox_max"])
        tol = self.contact_tol
        xy_overlap = bool(np.all(amin[:2] <= bmax[:2]) and np.all(bmin[:2] <= amax[:2]))
        if xy_overlap and abs(amin[2] - bmax[2]) <= tol:
            return "a on b"
        if xy_overlap and abs(bmin[2] - amax[2]) <= tol:
            return "b on a"
        if np.all(amin >= bmin - tol) and np.all(amax <= bmax + tol):
            return "a in b"
        if np.all(bmin >= amin - tol) and np.all(bmax <= amax + tol):
            return "b in a"
        gap = np.maximum(0.0, np.maximum(amin - bmax, bmin - amax))
        if float(np.linalg.norm(gap)) <= self.near_distance:
            return "near"
        return "none of these"

    def _assign(self, prompt: str) -> str:
        label = re.search(r'Which object is most likely a "([^"]*)"', prompt).group(1).lower()
        wanted = [label] + self.aliases.get(label, [])
        for line in prompt.splitlines():
            m = re.match(r"^(\d+): (.*)$", line)
            if m and any(w in m.group(2).lower() for w in wanted):
                return m.group(1)
        return "-1"


def load_mock_manifest(root) -> dict:
    path = Path(root) / "mock_manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"{path}: mock providers need a mock manifest")
    return json.loads(path.read_text())


def mock_providers(root):
    """All four mocks configured from a synthetic dataset directory."""
    from .registry import ProviderSet

    manifest = load_mock_manifest(root)
    palette = manifest.get("palette", [])
    return ProviderSet(
        segmentation=MockSegmentationProvider.from_fixture(root),
        embedding=MockEmbeddingProvider(
            dim=manifest.get("dim", 512), seed=manifest.get("seed", 0),
            synonyms=manifest.get("synonyms"), palette=palette,
        ),
        vlm=MockCaptionProvider(palette, reshot_background=manifest.get("reshot_background")),
        llm=MockReasonProvider(aliases=manifest.get("aliases")),
    )
