"""Pipeline configuration: TOML in, validated dataclasses out.

Validation is strict: unknown keys are errors, and every problem is reported
with its dotted field path rather than stopping at the first one.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, get_args, get_origin, get_type_hints

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .providers.base import ProviderConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("\n".join(problems))
        self.problems = problems


@dataclass
class MappingConfig:
    base_voxel: float = 0.01
    sim_threshold: float = 0.45
    strategy: str = "dynamic"
    min_points: int = 16
    max_depth: float = 10.0
    erode: bool = True
    refilter: bool = True
    require_overlap: bool = False
    keep_crops: int = 5


@dataclass
class ReshotConfig:
    alpha: float = 0.2
    beta: float = 0.2
    candidates: int = 64
    radius_multiplier: float = 1.5
    gamma: float = 100.0
    width: int = 256
    height: int = 256
    fov: float = 60.0
    splat_radius: int = 2
    gravity: list = field(default_factory=lambda: [0.0, 0.0, -1.0])
    max_hpr_points: int = 4000
    ranks: int = 1


@dataclass
class CaptionConfig:
    top_k: int = 5
    eps: float = 0.05


@dataclass
class RefineConfig:
    passes: int = 1
    filter_after_split: bool = False


@dataclass
class EdgesConfig:
    min_ratio: float = 0.1
    mst: bool = True
    base_voxel: Optional[float] = None
    include_embeddings: bool = False


@dataclass
class EvalConfig:
    gt: Optional[str] = None
    classes: Optional[str] = None
    assign: str = "embedding"


@dataclass
class StagesConfig:
    map: bool = True
    reshot: bool = True
    caption: bool = True
    refine: bool = True
    edges: bool = True
    eval: bool = True


@dataclass
class ProvidersConfig:
    segmentation: ProviderConfig = field(default_factory=ProviderConfig)
    embedding: ProviderConfig = field(default_factory=ProviderConfig)
    vlm: ProviderConfig = field(default_factory=ProviderConfig)
    llm: ProviderConfig = field(default_factory=ProviderConfig)


@dataclass
class PipelineConfig:
    dataset: Optional[str] = None
    output: Optional[str] = None
    seed: int = 0
    jobs: int = 1
    mapping: MappingConfig = field(default_factory=MappingConfig)
    reshot: ReshotConfig = field(default_factory=ReshotConfig)
    caption: CaptionConfig = field(default_factory=CaptionConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    edges: EdgesConfig = field(default_factory=EdgesConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    stages: StagesConfig = field(default_factory=StagesConfig)
    providers: ProvidersConfig = field(default_factory=ProvidersConfig)

    @property
    def edge_base(self) -> float:
        return self.edges.base_voxel if self.edges.base_voxel is not None else self.mapping.base_voxel

    def to_dict(self) -> dict:
        return asdict(self)

    def section_hash(self, *names: str) -> str:
        d = self.to_dict()
        blob = json.dumps({n: d[n] for n in names}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


_TYPE_NAMES = {int: "an integer", float: "a number", bool: "a boolean", str: "a string", list: "a list", dict: "a table"}


def _check_scalar(value, typ) -> Optional[Any]:
    """Coerced value, or None when ``value`` does not fit ``typ``."""
    if typ is bool:
        return value if isinstance(value, bool) else None
    if typ is int:
        return value if isinstance(value, int) and not isinstance(value, bool) else None
    if typ is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        return None
    if typ is str:
        return value if isinstance(value, str) else None
    if typ is list:
        return list(value) if isinstance(value, list) else None
    if typ is dict:
        return dict(value) if isinstance(value, dict) else None
    return None


def _build(cls, data, path: str, problems: list):
    if not isinstance(data, dict):
        problems.append(f"{path or '<root>'}: expected a table")
        return cls()
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in sorted(set(data) - known):
        problems.append(f"{path}{key}: unknown key")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        typ = hints[f.name]
        raw = data[f.name]
        where = f"{path}{f.name}"
        optional = get_origin(typ) is not None and type(None) in get_args(typ)
        if optional:
            if raw is None:
                kwargs[f.name] = None
                continue
            typ = next(a for a in get_args(typ) if a is not type(None))
        if hasattr(typ, "__dataclass_fields__"):
            kwargs[f.name] = _build(typ, raw, where + ".", problems)
            continue
        base = get_origin(typ) or typ
        value = _check_scalar(raw, base)
        if value is None:
            problems.append(f"{where}: must be {_TYPE_NAMES.get(base, base.__name__)}")
            continue
        kwargs[f.name] = value
    return cls(**kwargs)


def _constraints(cfg: PipelineConfig) -> list[str]:
    p = []
    m = cfg.mapping
    if not m.base_voxel > 0:
        p.append("mapping.base_voxel: must be > 0")
    if not 0 < m.sim_threshold < 2:
        p.append("mapping.sim_threshold: must lie in (0, 2)")
    if m.strategy not in ("dynamic", "fixed"):
        p.append("mapping.strategy: must be 'dynamic' or 'fixed'")
    if m.min_points < 1:
        p.append("mapping.min_points: must be >= 1")
    if not m.max_depth > 0:
        p.append("mapping.max_depth: must be > 0")
    if m.keep_crops < 0:
        p.append("mapping.keep_crops: must be >= 0")
    r = cfg.reshot
    if r.alpha < 0:
        p.append("reshot.alpha: must be >= 0")
    if r.beta < 0:
        p.append("reshot.beta: must be >= 0")
    if not r.alpha + r.beta < 1:
        p.append("reshot: alpha+beta must be < 1")
    if r.candidates < 1:
        p.append("reshot.candidates: must be >= 1")
    if not r.radius_multiplier > 0:
        p.append("reshot.radius_multiplier: must be > 0")
    if not r.gamma > 0:
        p.append("reshot.gamma: must be > 0")
    if r.width < 1 or r.height < 1:
        p.append("reshot.width/height: must be >= 1")
    if not 0 < r.fov < 180:
        p.append("reshot.fov: must lie in (0, 180)")
    if r.splat_radius < 0:
        p.append("reshot.splat_radius: must be >= 0")
    if len(r.gravity) != 3 or not all(isinstance(v, (int, float)) for v in r.gravity) or not any(r.gravity):
        p.append("reshot.gravity: must be a non-zero 3-vector")
    if r.max_hpr_points < 4:
        p.append("reshot.max_hpr_points: must be >= 4")
    if r.ranks < 1:
        p.append("reshot.ranks: must be >= 1")
    if cfg.caption.top_k < 1:
        p.append("caption.top_k: must be >= 1")
    if cfg.caption.eps < 0:
        p.append("caption.eps: must be >= 0")
    if cfg.refine.passes < 1:
        p.append("refine.passes: must be >= 1")
    if not cfg.edges.min_ratio > 0 or cfg.edges.min_ratio > 1:
        p.append("edges.min_ratio: must lie in (0, 1]")
    if cfg.edges.base_voxel is not None and not cfg.edges.base_voxel > 0:
        p.append("edges.base_voxel: must be > 0")
    if cfg.eval.assign not in ("embedding", "caption"):
        p.append("eval.assign: must be 'embedding' or 'caption'")
    if cfg.jobs < 1:
        p.append("jobs: must be >= 1")
    for role in ("segmentation", "embedding", "vlm", "llm"):
        p.extend(getattr(cfg.providers, role).problems(f"providers.{role}."))
    return p


def from_dict(data: dict) -> PipelineConfig:
    problems: list[str] = []
    cfg = _build(PipelineConfig, data, "", problems)
    # fields that failed type checks keep their defaults, so constraints still apply cleanly
    problems += _constraints(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path=None) -> PipelineConfig:
    """Parse and validate a TOML file; ``None`` gives the defaults."""
    if path is None:
        return from_dict({})
    try:
        data = tomllib.loads(Path(path).read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror}"]) from exc
    return from_dict(data)


def merge(data: dict, overrides: dict) -> dict:
    """Deep-merge dotted overrides (``{"mapping.base_voxel": 0.02}``) into a raw config dict."""
    out = json.loads(json.dumps(data))
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = out
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return out
