"""Object-level retrieval-augmented caption refinement.

Confident objects form a spatial document; each uncertain object is re-captioned
from a composite of its re-shot and best crop, with the caption of its nearest
documented neighbour as context.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .providers import prompts
from .providers.base import ProviderError

log = logging.getLogger(__name__)


class NoContext(LookupError):
    pass


@dataclass(frozen=True)
class DocEntry:
    object_id: int
    caption: str
    centroid: tuple

    def to_dict(self) -> dict:
        return {"object_id": self.object_id, "caption": self.caption, "centroid": list(self.centroid)}


class ObjectDocument:
    """Immutable caption+centroid entries with an exact nearest-centroid lookup."""

    def __init__(self, entries: Sequence[DocEntry]):
        self.entries = tuple(sorted(entries, key=lambda e: e.object_id))
        ids = [e.object_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate object ids in document")
        for e in self.entries:
            if not e.caption:
                raise ValueError(f"object {e.object_id} has an empty caption")
        self._xyz = np.array([e.centroid for e in self.entries], dtype=np.float64).reshape(-1, 3)
        self._ids = np.array(ids, dtype=np.int64)
        self._tree = cKDTree(self._xyz) if len(self.entries) else None

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, object_id: int) -> bool:
        return any(e.object_id == object_id for e in self.entries)

    def to_list(self) -> list:
        return [e.to_dict() for e in self.entries]

    def retrieve_nearest(self, position, exclude: Optional[int] = None) -> DocEntry:
        """Entry with the closest centroid (lowest id on ties), skipping ``exclude``."""
        usable = len(self.entries) - (1 if exclude is not None and exclude in self else 0)
        if usable <= 0:
            raise NoContext("no context available")
        q = np.asarray(position, dtype=np.float64).reshape(3)
        k = min(len(self.entries), 2)
        dists, idx = self._tree.query(q, k=k)
        dists, idx = np.atleast_1d(dists), np.atleast_1d(idx)
        d0 = next(d for d, i in zip(dists, idx) if self._ids[i] != exclude)
        # the tree only bounds the answer; resolve ties with exact distances
        cand = self._tree.query_ball_point(q, d0 * (1.0 + 1e-9) + 1e-12)
        cand = [i for i in cand if self._ids[i] != exclude]
        exact = np.linalg.norm(self._xyz[cand] - q, axis=1)
        best = exact.min()
        winner = min(int(self._ids[i]) for i, d in zip(cand, exact) if d == best)
        return next(e for e in self.entries if e.object_id == winner)


def background_verdict(crop, provider) -> tuple[Optional[bool], Optional[str]]:
    """True for background, False for foreground, None when the provider gave no usable answer."""
    try:
        reply = provider.caption(crop, prompts.render(prompts.BACKGROUND)).strip().lower()
    except ProviderError as exc:
        return None, str(exc)
    word = reply.split()[0].strip(".,!\"'") if reply else ""
    if word == "yes":
        return True, None
    if word == "no":
        return False, None
    return None, f"unparseable verdict {reply[:40]!r}"


def filter_background(crops: dict, provider) -> tuple[list[int], dict]:
    """Ids whose best crop is judged foreground, plus per-id flags.

    ``crops`` maps object id to its highest-confidence crop. Failures keep the
    object (fail-open) and flag it.
    """
    kept, flags = [], {}
    for oid in sorted(crops):
        verdict, err = background_verdict(crops[oid], provider)
        if verdict is None:
            log.warning("event=background_check_failed object=%d error=%s", oid, err)
            flags[oid] = ["background_check_failed"]
            kept.append(oid)
        elif verdict:
            flags[oid] = ["background"]
        else:
            kept.append(oid)
    return kept, flags


def split_by_uncertainty(uncertainty: dict) -> tuple[list[int], list[int]]:
    """Ascending-uncertainty ranking cut at ceil(N/2); ties by id."""
    ranked = sorted(uncertainty, key=lambda oid: (uncertainty[oid], oid))
    cut = math.ceil(len(ranked) / 2)
    return ranked[:cut], ranked[cut:]


def build_document(captions: dict, centroids: dict, ids: Sequence[int]) -> ObjectDocument:
    return ObjectDocument(
        [DocEntry(int(i), captions[i], tuple(float(v) for v in centroids[i])) for i in ids]
    )


def _to_rgb(image) -> np.ndarray:
    a = np.asarray(image)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    return a[..., :3].astype(np.uint8)


def compose_refinement_image(reshot, crop) -> tuple[np.ndarray, list]:
    """Re-shot on the left, crop scaled to the re-shot height on the right."""
    crop = _to_rgb(crop)
    if reshot is None:
        return crop, ["missing_reshot"]
    left = _to_rgb(reshot)
    h = left.shape[0]
    ch, cw = crop.shape[:2]
    w = max(1, int(round(cw * h / ch)))
    if (ch, cw) != (h, w):
        crop = np.asarray(Image.fromarray(crop).resize((w, h), Image.BILINEAR))
    return np.concatenate([left, crop], axis=1), []


def refine_caption(composite, env_caption: Optional[str], provider, fallback: str) -> tuple[str, list]:
    if env_caption is None:
        prompt, flags = prompts.render(prompts.REFINE_NOCONTEXT), ["no_context"]
    else:
        prompt, flags = prompts.render(prompts.REFINE, env=env_caption), []
    try:
        text = provider.caption(composite, prompt).strip()
        if not text:
            raise ProviderError("empty refinement")
        return text, flags
    except ProviderError as exc:
        log.warning("event=refine_fallback error=%s", exc)
        return fallback, flags + ["refine_fallback"]


@dataclass
class Refinement:
    object_id: int
    neighbor: Optional[int]
    env_caption: Optional[str]
    caption: str
    passes: int
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "object_id": self.object_id,
            "neighbor": self.neighbor,
            "env_caption": self.env_caption,
            "caption": self.caption,
            "passes": self.passes,
            "flags": sorted(set(self.flags)),
        }


@dataclass
class RefineResult:
    document: ObjectDocument
    low: list
    high: list
    final: dict
    refinements: list
    flags: dict


def refine_objects(
    captions: dict,
    uncertainty: dict,
    centroids: dict,
    best_crops: dict,
    reshots: dict,
    vlm,
    *,
    passes: int = 1,
    filter_after_split: bool = False,
    composite_crops: Optional[dict] = None,
) -> RefineResult:
    """Rank, document and refine. Every object id in ``captions`` gets a final caption.

    ``best_crops`` (highest confidence) drive the background check;
    ``composite_crops`` (best caption agreement) go into the refinement
    composite and default to ``best_crops``. Objects judged background keep
    their aggregated caption, stay out of the document and are not refined.
    """
    composite_crops = composite_crops if composite_crops is not None else best_crops
    if passes < 1:
        raise ValueError("passes must be >= 1")
    ids = sorted(captions)
    flags: dict = {i: [] for i in ids}
    if filter_after_split:
        low, high = split_by_uncertainty({i: uncertainty[i] for i in ids})
        kept, bg_flags = filter_background({i: best_crops[i] for i in low}, vlm)
        for i, f in bg_flags.items():
            flags[i] += f
        background = set(low) - set(kept)
        doc_ids = kept
    else:
        kept, bg_flags = filter_background({i: best_crops[i] for i in ids}, vlm)
        for i, f in bg_flags.items():
            flags[i] += f
        background = set(ids) - set(kept)
        low, high = split_by_uncertainty({i: uncertainty[i] for i in kept})
        doc_ids = low

    doc = build_document(captions, centroids, doc_ids)
    final = {i: captions[i] for i in ids}
    refinements = []
    current_doc = doc
    tasks = [i for i in high if i not in background]
    for p in range(passes):
        refined_now = {}
        for oid in tasks:
            comp, cflags = compose_refinement_image(reshots.get(oid), composite_crops[oid])
            try:
                entry = current_doc.retrieve_nearest(centroids[oid], exclude=oid)
                env, neighbor = entry.caption, entry.object_id
            except NoContext:
                env, neighbor = None, None
            text, rflags = refine_caption(comp, env, vlm, captions[oid])
            refined_now[oid] = text
            if p == passes - 1:
                refinements.append(Refinement(oid, neighbor, env, text, passes, cflags + rflags))
        final.update(refined_now)
        if p < passes - 1:
            extra = [DocEntry(i, refined_now[i], tuple(float(v) for v in centroids[i])) for i in tasks]
            current_doc = ObjectDocument(list(doc.entries) + extra)
    for r in refinements:
        flags[r.object_id] += r.flags
    return RefineResult(doc, low, high, final, refinements, {i: sorted(set(f)) for i, f in flags.items()})
