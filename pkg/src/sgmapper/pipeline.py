"""Stage orchestration with content-hash resumability.

Every stage writes into a private staging directory and its outputs are moved
into place only when it finishes, so an interrupted run leaves earlier stages
intact. ``manifest.json`` records each stage's input and output hashes; a stage
is skipped when both still match and nothing upstream ran in this invocation.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from PIL import Image

from . import __version__
from . import caption as cap
from . import geometry as geo
from . import graph as gr
from . import rag
from . import reshot as rs
from .config import PipelineConfig
from .evaluation import (
    GroundTruthCloud,
    assign_labels_caption,
    assign_labels_embedding,
    invert_assignment,
    metrics,
    nn_confusion,
)
from .fusion import ObjectMap, map_frames
from .ingest import load_sequence
from .providers import prompts
from .providers.registry import ProviderSet, build_providers

log = logging.getLogger(__name__)

STAGES = ("map", "reshot", "caption", "refine", "edges", "eval")
OUTPUTS = {
    "map": ("map",),
    "reshot": ("reshots",),
    "caption": ("captions.json",),
    "refine": ("document.json", "refinements.json"),
    "edges": ("scene_graph.json",),
    "eval": ("metrics.json",),
}


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _sha_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def hash_paths(root: Path, rels) -> Optional[str]:
    """Digest of files under ``root/rel`` for each rel (files or directories); None if any is missing."""
    h = hashlib.sha256()
    for rel in rels:
        p = root / rel
        if p.is_file():
            files = [p]
        elif p.is_dir():
            files = sorted(q for q in p.rglob("*") if q.is_file())
        else:
            return None
        for f in files:
            h.update(f.relative_to(root).as_posix().encode())
            h.update(b"\0")
            h.update(_sha_file(f).encode())
    return h.hexdigest()


def _hash_values(*values) -> str:
    return hashlib.sha256(json.dumps(values, sort_keys=True, default=str).encode()).hexdigest()


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _map_jobs(fn: Callable, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


DATASET_PARTS = ("intrinsics.json", "traj.txt", "color", "depth", "masks", "mock_manifest.json")


@dataclass
class StageResult:
    stage: str
    status: str
    seconds: float = 0.0
    error: Optional[str] = None


@dataclass
class RunResult:
    results: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.status != "failed" for r in self.results)

    @property
    def exit_code(self) -> int:
        return 0 if self.ok else 1

    def status(self, stage: str) -> Optional[str]:
        for r in self.results:
            if r.stage == stage:
                return r.status
        return None


class Pipeline:
    def __init__(self, config: PipelineConfig, providers: Optional[ProviderSet] = None):
        if not config.dataset:
            raise ValueError("config has no dataset path")
        if not config.output:
            raise ValueError("config has no output directory")
        self.cfg = config
        self.dataset = Path(config.dataset)
        self.out = Path(config.output)
        self._providers = providers

    @property
    def providers(self) -> ProviderSet:
        if self._providers is None:
            pc = self.cfg.providers
            configs = {"segmentation": pc.segmentation, "embedding": pc.embedding, "vlm": pc.vlm, "llm": pc.llm}
            self._providers = build_providers(configs, self.dataset, self.out / ".cache" / "providers")
        return self._providers

    # -- manifest ------------------------------------------------------------------

    @property
    def manifest_path(self) -> Path:
        return self.out / "manifest.json"

    def load_manifest(self) -> dict:
        try:
            return json.loads(self.manifest_path.read_text())
        except (FileNotFoundError, json.JSONDecodeError):
            return {}

    def _save_manifest(self, manifest: dict) -> None:
        manifest["version"] = __version__
        manifest["python"] = platform.python_version()
        manifest["config_hash"] = self.cfg.digest()
        _write_json(self.manifest_path, manifest)

    def output_hash(self, stage: str) -> Optional[str]:
        return hash_paths(self.out, OUTPUTS[stage])

    def input_hash(self, stage: str) -> str:
        cfg, pc = self.cfg, self.cfg.providers
        up = {s: self.output_hash(s) for s in STAGES[: STAGES.index(stage)]}
        if stage == "map":
            return _hash_values(hash_paths(self.dataset, [p for p in DATASET_PARTS if (self.dataset / p).exists()]),
                                cfg.section_hash("mapping"), pc.segmentation, pc.embedding)
        if stage == "reshot":
            return _hash_values(up["map"], cfg.section_hash("reshot"))
        if stage == "caption":
            return _hash_values(up["map"], up["reshot"], cfg.section_hash("caption"), pc.vlm, pc.embedding, pc.llm,
                                prompts.prompt_digest(prompts.CROP_CAPTION), prompts.prompt_digest(prompts.AGGREGATE))
        if stage == "refine":
            return _hash_values(up["map"], up["reshot"], up["caption"], cfg.section_hash("refine"), pc.vlm,
                                prompts.prompt_digest(prompts.REFINE), prompts.prompt_digest(prompts.BACKGROUND))
        if stage == "edges":
            return _hash_values(up["map"], up["caption"], up["refine"], cfg.section_hash("edges"), cfg.edge_base, pc.llm,
                                prompts.prompt_digest(prompts.RELATION))
        gt, classes = self.gt_paths()
        gt_hash = [_sha_file(p) if p is not None and p.is_file() else None for p in (gt, classes)]
        return _hash_values(up["map"], up["refine"], cfg.section_hash("eval"), gt_hash, pc.embedding, pc.llm)

    def gt_paths(self) -> tuple[Optional[Path], Optional[Path]]:
        gt = Path(self.cfg.eval.gt) if self.cfg.eval.gt else self.dataset / "gt.ply"
        classes = Path(self.cfg.eval.classes) if self.cfg.eval.classes else self.dataset / "classes.txt"
        return (gt if gt.is_file() else None), (classes if classes.is_file() else None)

    # -- running -------------------------------------------------------------------------

    def run(self, stages=None, force: bool = False) -> RunResult:
        """Run the enabled stages in order. Returns per-stage statuses; never raises on stage errors."""
        self.out.mkdir(parents=True, exist_ok=True)
        wanted = [s for s in STAGES if getattr(self.cfg.stages, s)] if stages is None else list(stages)
        manifest = self.load_manifest()
        manifest.setdefault("stages", {})
        result = RunResult()
        upstream_ran = force
        for stage in STAGES:
            if stage not in wanted:
                continue
            in_hash = self.input_hash(stage)
            prev = manifest["stages"].get(stage, {})
            current_out = self.output_hash(stage)
            if (
                not upstream_ran
                and prev.get("status") == "done"
                and prev.get("input_hash") == in_hash
                and current_out is not None
                and prev.get("output_hash") == current_out
            ):
                log.info("event=stage_skipped stage=%s", stage)
                result.results.append(StageResult(stage, "skipped"))
                continue
            upstream_ran = True
            log.info("event=stage_start stage=%s", stage)
            t0 = time.perf_counter()
            try:
                self.execute(stage)
            except Exception as exc:  # stage boundary: record and stop, keep finished outputs
                seconds = time.perf_counter() - t0
                log.error("event=stage_failed stage=%s seconds=%.3f error=%s", stage, seconds, exc)
                manifest["stages"][stage] = {"status": "failed", "input_hash": in_hash, "error": str(exc)}
                self._save_manifest(manifest)
                result.results.append(StageResult(stage, "failed", seconds, str(exc)))
                return result
            seconds = time.perf_counter() - t0
            manifest["stages"][stage] = {
                "status": "done",
                "input_hash": self.input_hash(stage),
                "output_hash": self.output_hash(stage),
                "seconds": round(seconds, 6),
            }
            self._save_manifest(manifest)
            log.info("event=stage_done stage=%s seconds=%.3f", stage, seconds)
            result.results.append(StageResult(stage, "done", seconds))
        return result

    def execute(self, stage: str) -> None:
        """Run one stage unconditionally and commit its outputs."""
        staging = self.out / ".staging" / stage
        if staging.exists():
            shutil.rmtree(staging)
        staging.mkdir(parents=True)
        getattr(self, f"_stage_{stage}")(staging)
        for rel in OUTPUTS[stage]:
            src, dst = staging / rel, self.out / rel
            if not src.exists():
                raise RuntimeError(f"stage {stage} did not produce {rel}")
            if dst.is_dir():
                shutil.rmtree(dst)
            elif dst.exists():
                dst.unlink()
            os.replace(src, dst)
        shutil.rmtree(staging)

    # -- stages --------------------------------------------------------------------------

    def _load_map(self) -> ObjectMap:
        return ObjectMap.from_dir(self.out / "map")

    def _stage_map(self, dst: Path) -> None:
        m = self.cfg.mapping
        omap = ObjectMap(
            m.base_voxel, m.sim_threshold, strategy=m.strategy, refilter=m.refilter,
            require_overlap=m.require_overlap, keep_crops=m.keep_crops,
        )
        p = self.providers
        stats = map_frames(
            omap, load_sequence(self.dataset), p.segmentation, p.embedding,
            min_points=m.min_points, max_depth=m.max_depth, erode=m.erode,
        )
        omap.to_dir(dst / "map")
        _write_json(
            dst / "map" / "stats.json",
            {
                "frames": [
                    {"frame": s.frame_index, "detections": s.detections, "points_in": s.points_in,
                     "points_kept": s.points_kept, "objects": s.objects_after}
                    for s in stats
                ],
                "detections": sum(s.detections for s in stats),
            },
        )

    def render_settings(self) -> rs.RenderSettings:
        r = self.cfg.reshot
        return rs.RenderSettings(
            width=r.width, height=r.height, fov=r.fov, splat_radius=r.splat_radius,
            gravity=tuple(float(v) for v in r.gravity), candidates=r.candidates,
            radius_multiplier=r.radius_multiplier, alpha=r.alpha, beta=r.beta, gamma=r.gamma,
            max_hpr_points=r.max_hpr_points,
        )

    def _stage_reshot(self, dst: Path) -> None:
        omap = self._load_map()
        settings = self.render_settings()
        (dst / "reshots").mkdir(parents=True)

        def one(obj):
            shots, cands = rs.reshoot_object(obj, settings, self.cfg.reshot.ranks)
            return shots, cands

        for obj, (shots, cands) in zip(omap.objects, _map_jobs(one, omap.objects, self.cfg.jobs)):
            for rank, shot in enumerate(shots):
                rs.write_reshot(dst, shot, rank, cands if rank == 0 else None)
            log.info("event=reshot object=%d s_view=%.4f", obj.id, shots[0].candidate.s_view)

    def _reshot_image(self, oid: int) -> Optional[np.ndarray]:
        path = self.out / "reshots" / f"{oid:04d}" / "rank0.png"
        return np.asarray(Image.open(path).convert("RGB")) if path.is_file() else None

    def _stage_caption(self, dst: Path) -> None:
        omap = self._load_map()
        p = self.providers
        c = self.cfg.caption

        def one(obj):
            image = self._reshot_image(obj.id)
            if image is None:
                raise RuntimeError(f"object {obj.id} has no re-shot image")
            return cap.uncertainty_record(obj, image, p.vlm, p.embedding, p.llm, k=c.top_k, eps=c.eps)

        records = _map_jobs(one, omap.objects, self.cfg.jobs)
        _write_json(dst / "captions.json", {str(r.object_id): r.to_dict() for r in records})

    def load_records(self) -> dict:
        data = json.loads((self.out / "captions.json").read_text())
        return {int(k): cap.UncertaintyRecord.from_dict(v) for k, v in data.items()}

    def _stage_refine(self, dst: Path) -> None:
        omap = self._load_map()
        records = self.load_records()
        ids = [o.id for o in omap.objects]
        missing = set(ids) - set(records)
        if missing:
            raise RuntimeError(f"objects without caption records: {sorted(missing)}")
        best, composite, centroids, reshots = {}, {}, {}, {}
        for obj in omap.objects:
            views = cap.top_k_views(obj, len(obj.views))
            best[obj.id] = views[0][1]
            rec = records[obj.id]
            good = [cc for cc in rec.crop_captions if cc.ok]
            top = good[int(np.argmax(rec.similarities))].frame_index
            composite[obj.id] = obj.crops[top]
            centroids[obj.id] = geo.centroid(obj.cloud)
            img = self._reshot_image(obj.id)
            if img is not None:
                reshots[obj.id] = img
        res = rag.refine_objects(
            {i: records[i].caption for i in ids},
            {i: records[i].uncertainty for i in ids},
            centroids, best, reshots, self.providers.vlm,
            passes=self.cfg.refine.passes,
            filter_after_split=self.cfg.refine.filter_after_split,
            composite_crops=composite,
        )
        _write_json(dst / "document.json", {"entries": res.document.to_list()})
        _write_json(
            dst / "refinements.json",
            {
                "low": res.low,
                "high": res.high,
                "refinements": [r.to_dict() for r in res.refinements],
                "final": {str(i): c for i, c in sorted(res.final.items())},
                "flags": {str(i): f for i, f in sorted(res.flags.items())},
            },
        )

    def load_final(self) -> tuple[dict, dict]:
        data = json.loads((self.out / "refinements.json").read_text())
        return ({int(k): v for k, v in data["final"].items()}, {int(k): v for k, v in data["flags"].items()})

    def _stage_edges(self, dst: Path) -> None:
        omap = self._load_map()
        records = self.load_records()
        final, flags = self.load_final()
        e = self.cfg.edges
        nodes = []
        for obj in omap.objects:
            rec = records[obj.id]
            nodes.append(
                gr.node_from_object(
                    obj.id, obj.cloud, final[obj.id], rec.uncertainty,
                    obj.embedding if e.include_embeddings else None,
                    sorted(set(flags.get(obj.id, []) + rec.flags)),
                )
            )
        graph = gr.build_graph(
            nodes, {o.id: o.cloud for o in omap.objects}, self.providers.llm,
            base=self.cfg.edge_base, min_ratio=e.min_ratio, mst=e.mst,
        )
        gr.serialize(graph, dst / "scene_graph.json")

    def _stage_eval(self, dst: Path) -> None:
        gt_path, classes_path = self.gt_paths()
        if gt_path is None or classes_path is None:
            _write_json(dst / "metrics.json", {"status": "no ground truth"})
            return
        gt = GroundTruthCloud.load(gt_path, classes_path)
        omap = self._load_map()
        final, _ = self.load_final()
        p = self.providers
        emb_assign, cos, ids = assign_labels_embedding({o.id: o.embedding for o in omap.objects}, gt.class_names, p.embedding)
        cosine = {(c, oid): float(cos[c, k]) for c in range(len(gt.class_names)) for k, oid in enumerate(ids)}
        flags = {}
        if self.cfg.eval.assign == "caption":
            assign, flags = assign_labels_caption(final, gt.class_names, p.llm)
        else:
            assign = emb_assign
        object_class = invert_assignment(assign, cosine)
        cm = nn_confusion(gt, {o.id: o.cloud for o in omap.objects}, object_class)
        report = metrics(cm)
        report.flags = {gt.class_names[c]: f for c, f in flags.items()}
        _write_json(
            dst / "metrics.json",
            {
                "assign": self.cfg.eval.assign,
                "assignment": {gt.class_names[c]: oid for c, oid in sorted(assign.items())},
                "classes": gt.class_names,
                "confusion": cm.counts.tolist(),
                "metrics": report.to_dict(),
            },
        )


def run_pipeline(config: PipelineConfig, providers: Optional[ProviderSet] = None, stages=None) -> RunResult:
    return Pipeline(config, providers).run(stages)


def extract_frames(dataset, providers: ProviderSet, mapping) -> list[list]:
    """Raw local objects per frame, so benchmarks can replay fusion without provider calls."""
    from .ingest import extract_local_objects

    return [
        extract_local_objects(
            frame, providers.segmentation, providers.embedding,
            min_points=mapping.min_points, max_depth=mapping.max_depth, erode=mapping.erode,
        )
        for frame in load_sequence(dataset)
    ]


def run_bench(config: PipelineConfig, strategies, out_dir, *, repeats: int = 1, providers: Optional[ProviderSet] = None) -> list:
    from .evaluation import benchmark_mapping, write_bench_csv

    if providers is None:
        pc = config.providers
        providers = build_providers(
            {"segmentation": pc.segmentation, "embedding": pc.embedding, "vlm": pc.vlm, "llm": pc.llm},
            Path(config.dataset), Path(out_dir) / ".cache" / "providers",
        )
    frames = extract_frames(config.dataset, providers, config.mapping)
    reports = []
    for strategy in strategies:
        rep = benchmark_mapping(
            frames, config.mapping.base_voxel, strategy, sim_threshold=config.mapping.sim_threshold, repeats=repeats
        )
        log.info("event=bench strategy=%s mean=%.4f median=%.4f points_kept=%d", strategy, rep.mean, rep.median, rep.points_kept)
        reports.append(rep)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_bench_csv(out / "bench.csv", reports)
    _write_json(out / "bench.json", {"reports": [r.summary() for r in reports]})
    return reports
