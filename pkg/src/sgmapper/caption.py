"""Initial crop captions and re-shot guided caption uncertainty."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .providers import prompts
from .providers.base import ProviderError, renormalize

log = logging.getLogger(__name__)


class CaptionFailure(RuntimeError):
    pass


@dataclass
class CropCaption:
    frame_index: int
    confidence: float
    caption: Optional[str]
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.caption is not None


@dataclass
class UncertaintyRecord:
    object_id: int
    crop_captions: list
    reshot_caption: str
    similarities: list
    cluster: list
    caption: str
    s_hat: float
    flags: list = field(default_factory=list)

    @property
    def uncertainty(self) -> float:
        return 1.0 - self.s_hat

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_captions"] = [asdict(c) if isinstance(c, CropCaption) else c for c in self.crop_captions]
        d["uncertainty"] = self.uncertainty
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UncertaintyRecord":
        return cls(
            object_id=int(d["object_id"]),
            crop_captions=[CropCaption(**c) for c in d["crop_captions"]],
            reshot_caption=d["reshot_caption"],
            similarities=[float(s) for s in d["similarities"]],
            cluster=[int(i) for i in d["cluster"]],
            caption=d["caption"],
            s_hat=float(d["s_hat"]),
            flags=list(d.get("flags", [])),
        )


def top_k_views(obj, k: int = 5) -> list:
    """``(ViewRecord, crop)`` pairs for the ``k`` most confident views that still hold a crop."""
    with_crop = [v for v in obj.views if v.frame_index in obj.crops]
    ranked = sorted(with_crop, key=lambda v: (-v.confidence, v.frame_index))[:k]
    return [(v, obj.crops[v.frame_index]) for v in ranked]


def initial_captions(views: Sequence, provider) -> list[CropCaption]:
    prompt = prompts.render(prompts.CROP_CAPTION)
    out = []
    for view, crop in views:
        try:
            text = provider.caption(crop, prompt).strip()
            if not text:
                raise ProviderError("empty caption")
            out.append(CropCaption(view.frame_index, view.confidence, text))
        except ProviderError as exc:
            log.warning("event=crop_caption_failed frame=%d error=%s", view.frame_index, exc)
            out.append(CropCaption(view.frame_index, view.confidence, None, str(exc)))
    return out


def caption_similarities(reshot_caption: str, captions: Sequence[str], emb) -> np.ndarray:
    ref = renormalize(emb.embed_text(reshot_caption))
    sims = [float(np.dot(ref, renormalize(emb.embed_text(c)))) for c in captions]
    return np.clip(np.asarray(sims, dtype=np.float64), -1.0, 1.0)


def two_means_1d(scores: Sequence[float]) -> tuple[list[int], list[int]]:
    """Globally optimal 2-means partition of scalars, as (low, high) index lists.

    In one dimension an optimal partition is a threshold split of the sorted
    values, so scanning every split between distinct values is exact. Ties in
    the within-cluster sum of squares go to the lowest threshold.
    """
    x = np.asarray(scores, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    n = len(xs)
    csum = np.cumsum(xs)
    csq = np.cumsum(xs * xs)
    best_cut, best_sse = None, np.inf
    for cut in range(1, n):
        if xs[cut] == xs[cut - 1]:
            continue
        left_n, right_n = cut, n - cut
        ls, rs = csum[cut - 1], csum[-1] - csum[cut - 1]
        lq, rq = csq[cut - 1], csq[-1] - csq[cut - 1]
        sse = (lq - ls * ls / left_n) + (rq - rs * rs / right_n)
        if sse < best_sse - 1e-12:
            best_cut, best_sse = cut, sse
    if best_cut is None:
        return [], sorted(order.tolist())
    return sorted(order[:best_cut].tolist()), sorted(order[best_cut:].tolist())


def cluster_top1(scores: Sequence[float], eps: float = 0.05) -> list[int]:
    """Indices of the higher-mean cluster of a 1-D 2-means split.

    Scores spanning less than ``eps`` stay together.
    """
    x = np.asarray(scores, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no scores to cluster")
    if x.size == 1 or float(x.max() - x.min()) < eps:
        return list(range(x.size))
    _, high = two_means_1d(x)
    return high


def aggregate_captions(captions: Sequence[str], scores: Sequence[float], provider) -> tuple[str, float, list]:
    """One caption for the cluster plus the mean of its scores."""
    if not captions:
        raise ValueError("nothing to aggregate")
    s_hat = float(np.mean(np.asarray(scores, dtype=np.float64)))
    flags = []
    prompt = prompts.render(prompts.AGGREGATE, captions=json.dumps(list(captions)))
    try:
        text = provider.complete(prompt).strip()
        if not text:
            raise ProviderError("empty aggregation")
    except ProviderError as exc:
        log.warning("event=aggregation_fallback error=%s", exc)
        text = captions[int(np.argmax(np.asarray(scores)))]
        flags.append("aggregation_fallback")
    return text, s_hat, flags


def uncertainty_record(obj, reshot_image, vlm, emb, llm, *, k: int = 5, eps: float = 0.05) -> UncertaintyRecord:
    """Caption the top-k crops and the re-shot, score agreement, cluster and aggregate."""
    crop_caps = initial_captions(top_k_views(obj, k), vlm)
    good = [c for c in crop_caps if c.ok]
    if not good:
        raise CaptionFailure(f"object {obj.id}: every crop caption failed")
    flags = ["caption_failed"] if len(good) < len(crop_caps) else []
    reshot_caption = vlm.caption(reshot_image, prompts.render(prompts.CROP_CAPTION)).strip()
    if not reshot_caption:
        raise CaptionFailure(f"object {obj.id}: empty re-shot caption")
    texts = [c.caption for c in good]
    sims = caption_similarities(reshot_caption, texts, emb)
    cluster = cluster_top1(sims, eps)
    caption, s_hat, agg_flags = aggregate_captions([texts[i] for i in cluster], sims[cluster], llm)
    return UncertaintyRecord(
        object_id=obj.id,
        crop_captions=crop_caps,
        reshot_caption=reshot_caption,
        similarities=[float(s) for s in sims],
        cluster=cluster,
        caption=caption,
        s_hat=s_hat,
        flags=flags + agg_flags,
    )
