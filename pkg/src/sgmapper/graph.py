"""Scene graph assembly: proximity candidates, spanning-tree pruning, relation labels."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.cluster.hierarchy import DisjointSet

from . import geometry as geo
from .geometry import PointCloud, SpatialIndex
from .providers import prompts
from .providers.base import ProviderError

log = logging.getLogger(__name__)

RELATIONS = (
    "a on b",
    "b on a",
    "a in b",
    "b in a",
    "a part of b",
    "b part of a",
    "near",
    "none of these",
)
NO_RELATION = "none of these"


def parse_relation(text: str) -> Optional[str]:
    """The relation label ``text`` names, or None. Only the exact label (modulo outer whitespace) counts."""
    if not isinstance(text, str):
        return None
    s = text.strip()
    return s if s in RELATIONS else None


@dataclass
class Node:
    id: int
    caption: str
    uncertainty: float
    centroid: list
    bbox: dict
    embedding: Optional[list] = None
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "caption": self.caption,
            "uncertainty": self.uncertainty,
            "centroid": list(self.centroid),
            "bbox": {"min": list(self.bbox["min"]), "max": list(self.bbox["max"])},
            "flags": sorted(self.flags),
        }
        if self.embedding is not None:
            d["embedding"] = list(self.embedding)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Node":
        return cls(
            id=int(d["id"]), caption=d["caption"], uncertainty=d["uncertainty"],
            centroid=list(d["centroid"]), bbox={"min": list(d["bbox"]["min"]), "max": list(d["bbox"]["max"])},
            embedding=d.get("embedding"), flags=list(d.get("flags", [])),
        )


@dataclass
class Edge:
    a: int
    b: int
    relation: str
    score: float
    flags: list = field(default_factory=list)

    def __post_init__(self):
        if self.a >= self.b:
            raise ValueError("edge endpoints must satisfy a < b")
        if self.relation not in RELATIONS:
            raise ValueError(f"unknown relation {self.relation!r}")

    def to_dict(self) -> dict:
        d = {"a": self.a, "b": self.b, "relation": self.relation, "score": self.score}
        if self.flags:
            d["flags"] = sorted(self.flags)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Edge":
        return cls(int(d["a"]), int(d["b"]), d["relation"], d["score"], list(d.get("flags", [])))


@dataclass
class SceneGraph:
    nodes: list = field(default_factory=list)
    edges: list = field(default_factory=list)

    def validate(self) -> None:
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids")
        known = set(ids)
        seen = set()
        for e in self.edges:
            if e.a not in known or e.b not in known:
                raise ValueError(f"edge ({e.a}, {e.b}) references a missing node")
            if (e.a, e.b) in seen:
                raise ValueError(f"duplicate edge ({e.a}, {e.b})")
            seen.add((e.a, e.b))

    def to_dict(self) -> dict:
        return {
            "nodes": [n.to_dict() for n in sorted(self.nodes, key=lambda n: n.id)],
            "edges": [e.to_dict() for e in sorted(self.edges, key=lambda e: (e.a, e.b))],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGraph":
        return cls([Node.from_dict(n) for n in d["nodes"]], [Edge.from_dict(e) for e in d["edges"]])


def serialize(graph: SceneGraph, path) -> None:
    graph.validate()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(graph.dumps())
    os.replace(tmp, path)


def deserialize(path) -> SceneGraph:
    return SceneGraph.from_dict(json.loads(Path(path).read_text()))


# --- candidates and pruning ------------------------------------------------------


def pair_score(a: PointCloud, b: PointCloud, base: float, ia=None, ib=None) -> float:
    thr = geo.dynamic_nn_threshold(a, b, base)
    return max(geo.nn_ratio(a, ib if ib is not None else b, thr), geo.nn_ratio(b, ia if ia is not None else a, thr))


def candidate_edges(clouds: dict, base: float = 0.01, min_ratio: float = 0.1) -> list[tuple[int, int, float]]:
    """Pairs whose symmetric dynamic NN ratio reaches ``min_ratio``.

    Pairs whose boxes are more than four thresholds apart are skipped without
    a query; with a positive ``min_ratio`` they could never qualify.
    """
    if not min_ratio > 0:
        raise ValueError("min_ratio must be > 0")
    ids = sorted(clouds)
    boxes = {i: geo.bbox(clouds[i]) for i in ids}
    sqrt_diag = {i: float(np.sqrt(geo.bbox_diagonal(boxes[i]))) for i in ids}
    indexes: dict = {}

    def index(i):
        if i not in indexes:
            indexes[i] = SpatialIndex(clouds[i])
        return indexes[i]

    out = []
    for x, i in enumerate(ids):
        for j in ids[x + 1 :]:
            delta = base * (sqrt_diag[i] + sqrt_diag[j]) / 2.0
            if boxes[i].gap(boxes[j]) > 4.0 * delta:
                continue
            s = pair_score(clouds[i], clouds[j], base, index(i), index(j))
            if s >= min_ratio:
                out.append((i, j, s))
    return out


def prune_mst(candidates: Sequence[tuple], nodes: Optional[Sequence[int]] = None) -> list[tuple[int, int, float]]:
    """Maximum-score spanning forest (Kruskal), deterministic under (score, i, j) ordering."""
    ids = set(nodes) if nodes is not None else set()
    for i, j, _ in candidates:
        ids.update((i, j))
    ds = DisjointSet(sorted(ids))
    kept = []
    for i, j, s in sorted(candidates, key=lambda c: (-c[2], min(c[0], c[1]), max(c[0], c[1]))):
        if ds.merge(i, j):
            kept.append((min(i, j), max(i, j), s))
    return sorted(kept)


# --- relation labelling ------------------------------------------------------------


def _fmt(values) -> list:
    return [round(float(v), 2) for v in values]


def pair_description(a: Node, b: Node) -> str:
    desc = {
        "a": {"caption": a.caption, "centroid": _fmt(a.centroid), "bbox_min": _fmt(a.bbox["min"]), "bbox_max": _fmt(a.bbox["max"])},
        "b": {"caption": b.caption, "centroid": _fmt(b.centroid), "bbox_min": _fmt(b.bbox["min"]), "bbox_max": _fmt(b.bbox["max"])},
    }
    return json.dumps(desc)


def label_relation(a: Node, b: Node, provider) -> tuple[str, list]:
    """Relation between two nodes with ``a`` the lower id. Returns (label, flags)."""
    if a.id > b.id:
        a, b = b, a
    prompt = prompts.render(prompts.RELATION, pair=pair_description(a, b))
    attempts = [prompt, prompt + "\n" + prompts.load_prompt(prompts.RELATION_REMINDER)]
    errors = []
    for text in attempts:
        try:
            label = parse_relation(provider.complete(text))
        except ProviderError as exc:
            errors.append(str(exc))
            label = None
        if label is not None:
            return label, []
    log.warning("event=relation_parse_fallback a=%d b=%d errors=%s", a.id, b.id, errors)
    return "near", ["parse_fallback"]


def label_relations(pairs: Sequence[tuple], nodes: dict, provider) -> list[Edge]:
    edges = []
    for i, j, score in pairs:
        label, flags = label_relation(nodes[i], nodes[j], provider)
        if label == NO_RELATION:
            continue
        edges.append(Edge(min(i, j), max(i, j), label, float(score), flags))
    return edges


def node_from_object(oid: int, cloud: PointCloud, caption: str, uncertainty: float, embedding=None, flags=()) -> Node:
    box = geo.bbox(cloud)
    return Node(
        id=int(oid),
        caption=caption,
        uncertainty=float(uncertainty),
        centroid=[float(v) for v in geo.centroid(cloud)],
        bbox=box.to_dict(),
        embedding=None if embedding is None else [float(v) for v in embedding],
        flags=list(flags),
    )


def build_graph(nodes: list, clouds: dict, provider, *, base: float = 0.01, min_ratio: float = 0.1, mst: bool = True) -> SceneGraph:
    cands = candidate_edges(clouds, base, min_ratio)
    pairs = prune_mst(cands, [n.id for n in nodes]) if mst else sorted(cands)
    by_id = {n.id: n for n in nodes}
    graph = SceneGraph(sorted(nodes, key=lambda n: n.id), label_relations(pairs, by_id, provider))
    graph.validate()
    return graph
