"""Command-line entry point.

Every verb resolves a full config (TOML file, then flag overrides), stores the
resolved snapshot as ``config.json`` in the output directory and runs the
matching pipeline stages. Later verbs pointed at that directory pick the
snapshot back up, so ``sgmapper caption out/`` needs no repeated flags.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path
from typing import Optional

import click

from . import __version__
from .config import ConfigError, from_dict, load_config, merge
from .pipeline import STAGES, Pipeline, run_bench

log = logging.getLogger("sgmapper")

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 1, 2
SNAPSHOT = "config.json"


def _setup_logging(verbose: int) -> None:
    level = logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING
    logging.basicConfig(
        level=level,
        stream=sys.stderr,
        format="time=%(asctime)s level=%(levelname)s logger=%(name)s %(message)s",
        force=True,
    )


def _raw_config(config_path: Optional[str], out_dir: Optional[str]) -> dict:
    """Base config dict: explicit file, else the output directory's snapshot, else defaults."""
    if config_path:
        return load_config(config_path).to_dict()
    if out_dir and (Path(out_dir) / SNAPSHOT).is_file():
        return json.loads((Path(out_dir) / SNAPSHOT).read_text())
    return from_dict({}).to_dict()


def _resolve(config_path, out_dir, overrides: dict):
    return from_dict(merge(_raw_config(config_path, out_dir), overrides))


def _fail_config(exc: ConfigError):
    for p in exc.problems:
        click.echo(f"config error: {p}", err=True)
    sys.exit(EXIT_CONFIG)


def _save_snapshot(cfg) -> None:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / SNAPSHOT).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def _run_stages(cfg, stages) -> None:
    if not cfg.dataset or not Path(cfg.dataset).is_dir():
        click.echo(f"config error: dataset: not a directory: {cfg.dataset}", err=True)
        sys.exit(EXIT_CONFIG)
    _save_snapshot(cfg)
    result = Pipeline(cfg).run(stages)
    for r in result.results:
        line = f"{r.stage}: {r.status}"
        if r.error:
            line += f" ({r.error})"
        click.echo(line)
    sys.exit(result.exit_code)


def _stage_command(stage: str, overrides_of):
    """Body shared by the single-stage verbs that operate on an existing output directory."""

    def body(out_dir, config_path, jobs, **flags):
        try:
            cfg = _resolve(config_path, out_dir, {"output": out_dir, "jobs": jobs, **overrides_of(flags)})
        except ConfigError as exc:
            _fail_config(exc)
        _run_stages(cfg, [stage])

    return body


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="sgmapper")
@click.option("-v", "--verbose", count=True, help="-v for info events, -vv for debug.")
def main(verbose: int) -> None:
    """Build open-vocabulary 3D scene graphs from posed RGB-D sequences."""
    _setup_logging(verbose)


_config_opt = click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TOML config file.")
_jobs_opt = click.option("--jobs", type=int, default=None, help="Worker threads within a stage.")


@main.command("map")
@click.argument("dataset", type=click.Path(file_okay=False))
@click.option("-o", "--output", required=True, type=click.Path(file_okay=False))
@click.option("--base-voxel", type=float)
@click.option("--sim-threshold", type=float)
@click.option("--strategy", type=click.Choice(["dynamic", "fixed"]))
@click.option("--refilter/--no-refilter", default=None, help="Re-downsample merged clouds after each union.")
@click.option("--require-overlap/--no-require-overlap", default=None, help="Only match objects that share points.")
@_config_opt
@_jobs_opt
def map_cmd(dataset, output, base_voxel, sim_threshold, strategy, refilter, require_overlap, config_path, jobs):
    """Fuse per-frame detections into global objects."""
    try:
        cfg = _resolve(config_path, output, {
            "dataset": str(dataset), "output": str(output), "jobs": jobs,
            "mapping.base_voxel": base_voxel, "mapping.sim_threshold": sim_threshold, "mapping.strategy": strategy,
            "mapping.refilter": refilter, "mapping.require_overlap": require_overlap,
        })
    except ConfigError as exc:
        _fail_config(exc)
    _run_stages(cfg, ["map"])


def _out_arg(f):
    return click.argument("out_dir", type=click.Path(file_okay=False, exists=True))(f)


@main.command("reshot")
@_out_arg
@click.option("--alpha", type=float)
@click.option("--beta", type=float)
@click.option("--candidates", type=int)
@_config_opt
@_jobs_opt
def reshot_cmd(out_dir, config_path, jobs, **flags):
    """Render a best-view image of every object."""
    _stage_command("reshot", lambda f: {f"reshot.{k}": v for k, v in f.items()})(out_dir, config_path, jobs, **flags)


@main.command("caption")
@_out_arg
@click.option("--top-k", type=int)
@_config_opt
@_jobs_opt
def caption_cmd(out_dir, config_path, jobs, top_k):
    """Caption crops and re-shots and score caption uncertainty."""
    _stage_command("caption", lambda f: {"caption.top_k": f["top_k"]})(out_dir, config_path, jobs, top_k=top_k)


@main.command("refine")
@_out_arg
@click.option("--passes", type=int)
@click.option("--filter-after-split/--filter-before-split", default=None, help="Order of background filtering and ranking.")
@_config_opt
@_jobs_opt
def refine_cmd(out_dir, config_path, jobs, passes, filter_after_split):
    """Refine uncertain captions with retrieved neighbour context."""
    _stage_command(
        "refine", lambda f: {"refine.passes": f["passes"], "refine.filter_after_split": f["filter_after_split"]}
    )(out_dir, config_path, jobs, passes=passes, filter_after_split=filter_after_split)


@main.command("edges")
@_out_arg
@click.option("--min-ratio", type=float)
@click.option("--base-voxel", type=float, help="Voxel base for edge proximity (defaults to the mapping base).")
@click.option("--mst/--no-mst", default=None)
@_config_opt
@_jobs_opt
def edges_cmd(out_dir, config_path, jobs, min_ratio, base_voxel, mst):
    """Propose, prune and label object relations; write scene_graph.json."""
    _stage_command(
        "edges",
        lambda f: {"edges.min_ratio": f["min_ratio"], "edges.base_voxel": f["base_voxel"], "edges.mst": f["mst"]},
    )(out_dir, config_path, jobs, min_ratio=min_ratio, base_voxel=base_voxel, mst=mst)


@main.command("eval")
@_out_arg
@click.option("--gt", type=click.Path(dir_okay=False, exists=True))
@click.option("--classes", type=click.Path(dir_okay=False, exists=True))
@click.option("--assign", type=click.Choice(["embedding", "caption"]))
@_config_opt
@_jobs_opt
def eval_cmd(out_dir, config_path, jobs, gt, classes, assign):
    """Score the map against a labelled ground-truth cloud."""
    _stage_command(
        "eval", lambda f: {"eval.gt": f["gt"], "eval.classes": f["classes"], "eval.assign": f["assign"]}
    )(out_dir, config_path, jobs, gt=gt, classes=classes, assign=assign)


@main.command("run")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TOML config file.")
@click.option("--dataset", type=click.Path(file_okay=False))
@click.option("-o", "--output", type=click.Path(file_okay=False))
@click.option("--stage", "stages", multiple=True, type=click.Choice(STAGES), help="Restrict to these stages.")
@_jobs_opt
def run_cmd(config_path, dataset, output, stages, jobs):
    """Run every enabled stage, skipping those whose inputs are unchanged."""
    try:
        cfg = _resolve(config_path, None if config_path else output, {"dataset": dataset, "output": output, "jobs": jobs})
    except ConfigError as exc:
        _fail_config(exc)
    if not cfg.output:
        _fail_config(ConfigError(["output: required (config or -o)"]))
    _run_stages(cfg, list(stages) or None)


@main.command("bench")
@click.argument("dataset", type=click.Path(file_okay=False, exists=True))
@click.option("-o", "--output", type=click.Path(file_okay=False), default=".", show_default=True)
@click.option("--strategy", type=click.Choice(["dynamic", "fixed", "both"]), default="both", show_default=True)
@click.option("--base-voxel", type=float)
@click.option("--repeats", type=int, default=1, show_default=True)
@_config_opt
def bench_cmd(dataset, output, strategy, base_voxel, repeats, config_path):
    """Time fixed against dynamic downsample-mapping; write bench.csv."""
    try:
        cfg = _resolve(config_path, None, {"dataset": str(dataset), "output": str(output), "mapping.base_voxel": base_voxel})
    except ConfigError as exc:
        _fail_config(exc)
    strategies = ["fixed", "dynamic"] if strategy == "both" else [strategy]
    reports = run_bench(cfg, strategies, output, repeats=repeats)
    for rep in reports:
        click.echo(f"{rep.strategy}: mean={rep.mean:.4f}s median={rep.median:.4f}s points_kept={rep.points_kept}")
    if len(reports) == 2 and reports[0].mean > 0:
        click.echo(f"dynamic/fixed mean ratio: {reports[1].mean / reports[0].mean:.3f}")


@main.command("gen-fixture")
@click.argument("root", type=click.Path(file_okay=False))
@click.option("--scene", type=click.Choice(["default", "bench"]), default="default", show_default=True)
@click.option("--frames", type=int, default=None)
def gen_fixture_cmd(root, scene, frames):
    """Write a synthetic ray-cast dataset with mock-provider manifest and ground truth."""
    from .synthetic import generate

    if frames is not None and frames < 1:
        click.echo("config error: frames: must be >= 1", err=True)
        sys.exit(EXIT_CONFIG)
    path = generate(root, scene, frames)
    click.echo(str(path))


if __name__ == "__main__":  # pragma: no cover
    main()
