#!/usr/bin/env python3
"""densetok CLI - synthesize data, build density masks, train, evaluate, infer, check gradients."""
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import click
import numpy as np
from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table

from . import __version__
from .config import RunConfig, _load_file_config, load_config, write_effective_config
from .data import (
    Scene,
    load_manifest,
    load_scenes,
    load_split_file,
    read_pgm,
    split_ids,
    synth_scenes,
    write_dataset,
    write_pgm,
)
from .density import coarse_density_map, pool_mask_to_tokens
from .detect import EvalReport, format_detection
from .errors import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, DataError, DenseTokError
from .gradcheck import SUITE, level_color, run_suite, suite_passed
from .model import DenseTokModel
from .serialize import write_tnsr
from .themes import DEFAULT_THEME, get_theme
from .train import CHECKPOINT_NAME, Trainer, detect_scenes, evaluate_model

logger = logging.getLogger("densetok")

# ---------------------------------------------------------------------------
# Console setup
# ---------------------------------------------------------------------------

_consoles: Dict[str, Console] = {}


def _get_console(theme: str = DEFAULT_THEME, stderr: bool = False) -> Console:
    key = f"{theme}:{stderr}"
    if key not in _consoles:
        _consoles[key] = Console(theme=get_theme(theme), stderr=stderr)
    return _consoles[key]


def _setup_logging(verbose: bool) -> None:
    pkg = logging.getLogger("densetok")
    for handler in list(pkg.handlers):
        pkg.removeHandler(handler)
    handler = RichHandler(console=_get_console(stderr=True), show_path=False, markup=False)
    pkg.addHandler(handler)
    pkg.setLevel(logging.DEBUG if verbose else logging.INFO)
    pkg.propagate = False


class DenseTokGroup(click.Group):
    """Maps usage errors to exit 1 and library errors to their own exit codes."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        if not standalone_mode:
            return super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
        try:
            rv = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
        except click.ClickException as exc:
            exc.show()
            sys.exit(EXIT_USAGE)
        except click.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(EXIT_USAGE)
        except DenseTokError as exc:
            _get_console(stderr=True).print(f"[densetok.error]error:[/] {escape(str(exc))}")
            sys.exit(exc.exit_code)
        sys.exit(rv if isinstance(rv, int) else EXIT_OK)


# ---------------------------------------------------------------------------
# Shared options and helpers
# ---------------------------------------------------------------------------

def common_options(fn):
    fn = click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
                      help="Output directory (default: paths.out_dir).")(fn)
    fn = click.option("--seed", type=click.IntRange(min=0), default=None,
                      help="Run seed; fixes data synthesis, init and batching.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                      default=None, help="JSON or TOML config file.")(fn)
    return fn


def _load_run(config_path: Optional[str], seed: Optional[int], out_dir: Optional[str],
              **overrides: Any) -> RunConfig:
    return load_config(config_path, seed=seed, **{"paths.out_dir": out_dir}, **overrides)


def _scenes_for(run: RunConfig, manifest: Optional[str], split: str,
                split_file: Optional[str] = None) -> List[Scene]:
    """Scenes of `split` from a manifest, or synthesized in memory when no manifest is given."""
    names = run.synth.class_names
    if manifest is not None:
        return load_scenes(load_manifest(manifest, split_file), split, names)
    scenes = synth_scenes(run.synth, run.train.scenes)
    if split == "all":
        return scenes
    ids = [s.id for s in scenes]
    groups = load_split_file(split_file) if split_file else split_ids(ids, run.synth.val_stride)
    if split not in groups:
        raise DataError(f"no split {split!r} (have {sorted(groups)})")
    wanted = set(groups[split])
    return [s for s in scenes if s.id in wanted]


def _checkpoint_path(run: RunConfig, checkpoint: Optional[str]) -> Path:
    if checkpoint:
        return Path(checkpoint)
    if run.paths.checkpoint:
        return Path(run.paths.checkpoint)
    return run.paths.out / CHECKPOINT_NAME


def _load_model(run: RunConfig, config_path: Optional[str], checkpoint: Optional[str]) -> DenseTokModel:
    expected = None
    if config_path is not None and "model" in _load_file_config(config_path):
        expected = run.model
    return DenseTokModel.load(_checkpoint_path(run, checkpoint), expected)


def _report_table(report: EvalReport, title: str) -> Table:
    table = Table(title=title, title_style="densetok.header")
    table.add_column("Metric", style="densetok.highlight")
    table.add_column("Value", style="densetok.metric", justify="right")
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"  # noqa: E731
    for name, ap in report.per_class.items():
        table.add_row(f"AP[{name}]", fmt(ap))
    table.add_row("mAP", fmt(report.mAP))
    table.add_row("recall", fmt(report.recall))
    table.add_row("images", str(report.num_images))
    table.add_row("targets", str(report.num_gt))
    table.add_row("detections", str(report.num_detections))
    return table


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

@click.group(cls=DenseTokGroup)
@click.version_option(__version__, prog_name="densetok")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging.")
def cli(verbose: bool) -> None:
    """Density-gated token ViT detector for dense small targets."""
    _setup_logging(verbose)


@cli.command()
@common_options
@click.option("--count", type=click.IntRange(min=0), default=None,
              help="Number of scenes (default: train.scenes).")
def synth(config_path: Optional[str], seed: Optional[int], out_dir: Optional[str],
          count: Optional[int]) -> int:
    """Write a synthetic dense-scene dataset: PGM images, annotations, manifest.json."""
    run = _load_run(config_path, seed, out_dir)
    con = _get_console(run.theme)
    n = run.train.scenes if count is None else count
    manifest = write_dataset(run.synth, n, run.paths.out)
    write_effective_config(run, run.paths.out)
    table = Table(title="Synthetic dataset", title_style="densetok.header")
    table.add_column("Split", style="densetok.highlight")
    table.add_column("Scenes", style="densetok.metric", justify="right")
    for name, ids in manifest.split.items():
        table.add_row(name, str(len(ids)))
    con.print(table)
    con.print(f"[densetok.success]Wrote {n} scenes to {escape(str(run.paths.out))}[/]")
    return EXIT_OK


@cli.command()
@common_options
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--split", default="all", show_default=True)
def mask(config_path: Optional[str], seed: Optional[int], out_dir: Optional[str],
         manifest: str, split: str) -> int:
    """Coarse density maps per image: PGM heatmap, TNSR map and token-grid TNSR."""
    run = _load_run(config_path, seed, out_dir)
    con = _get_console(run.theme)
    out = run.paths.out / "masks"
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    scenes = load_scenes(load_manifest(manifest), split, run.synth.class_names)
    patch = run.model.patch_size
    for scene in scenes:
        density = coarse_density_map(scene.boxes, scene.height, scene.width)
        clipped = np.clip(density.values, 0.0, 1.0)
        write_pgm(out / f"{scene.id}_density.pgm", clipped)
        write_tnsr(out / f"{scene.id}_density.tnsr", density.values)
        write_tnsr(out / f"{scene.id}_tokens.tnsr", pool_mask_to_tokens(clipped, patch))
    con.print(f"[densetok.success]Wrote density artifacts for {len(scenes)} images to "
              f"{escape(str(out))}[/]")
    return EXIT_OK


@cli.command()
@common_options
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Dataset manifest; scenes are synthesized in memory when omitted.")
@click.option("--split-file", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--iters", type=click.IntRange(min=0), default=None)
@click.option("--batch-size", type=click.IntRange(min=1), default=None)
@click.option("--eval-every", type=click.IntRange(min=0), default=None)
@click.option("--workers", type=click.IntRange(min=1), default=None)
def train(config_path: Optional[str], seed: Optional[int], out_dir: Optional[str],
          manifest: Optional[str], split_file: Optional[str], iters: Optional[int],
          batch_size: Optional[int], eval_every: Optional[int], workers: Optional[int]) -> int:
    """Train the detector; writes metrics.csv, eval.jsonl and checkpoint.ckpt."""
    run = _load_run(config_path, seed, out_dir, **{
        "train.iters": iters, "train.batch_size": batch_size,
        "train.eval_every": eval_every, "train.workers": workers,
    })
    con = _get_console(run.theme)
    train_scenes = _scenes_for(run, manifest, "train", split_file)
    val_scenes = _scenes_for(run, manifest, "val", split_file)
    trainer = Trainer(run, train_scenes, val_scenes)
    con.print(f"[densetok.info]{len(train_scenes)} train / {len(val_scenes)} val scenes, "
              f"{trainer.model.num_parameters()} parameters[/]")

    progress = Progress(
        TextColumn("[densetok.header]train"),
        BarColumn(),
        MofNCompleteColumn(),
        TextColumn("[densetok.metric]{task.fields[loss]}"),
        TimeElapsedColumn(),
        console=con,
        transient=True,
    )
    with progress:
        task = progress.add_task("train", total=run.train.iters, loss="")
        result = trainer.fit(
            lambda t, v: progress.update(task, advance=1, loss=f"loss {v['total']:.4f}")
        )

    table = Table(title="Training", title_style="densetok.header")
    table.add_column("Term", style="densetok.highlight")
    table.add_column("First", style="densetok.metric", justify="right")
    table.add_column("Last", style="densetok.metric", justify="right")
    if result.losses:
        for key in ("total", "objectness", "box_reg", "focus_aux", "density_aux", "lr"):
            table.add_row(key, f"{result.losses[0][key]:.6g}", f"{result.losses[-1][key]:.6g}")
        con.print(table)
    if result.evals:
        con.print(_report_table(result.evals[-1], "Validation"))
    con.print(f"[densetok.success]Checkpoint saved to {escape(str(result.checkpoint))}[/]")
    return EXIT_OK


@cli.command(name="eval")
@common_options
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--split", default="val", show_default=True)
@click.option("--split-file", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--workers", type=click.IntRange(min=1), default=None)
@click.option("--format", "fmt", type=click.Choice(["json", "table"]), default="json",
              show_default=True)
def eval_cmd(config_path: Optional[str], seed: Optional[int], out_dir: Optional[str],
             checkpoint: Optional[str], manifest: Optional[str], split: str,
             split_file: Optional[str], workers: Optional[int], fmt: str) -> int:
    """Evaluate a checkpoint with ground-truth-free masks; prints mAP, recall, per-class AP."""
    run = _load_run(config_path, seed, out_dir, **{"train.workers": workers})
    model = _load_model(run, config_path, checkpoint)
    scenes = _scenes_for(run, manifest, split, split_file)
    report = evaluate_model(model, scenes, run.synth.class_names, run.train.score_thresh,
                            run.train.nms_iou, run.train.workers)
    payload = report.to_json()
    try:
        run.paths.out.mkdir(parents=True, exist_ok=True)
        (run.paths.out / f"eval_{split}.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write evaluation report: {exc}") from exc
    if fmt == "table":
        _get_console(run.theme).print(_report_table(report, f"Evaluation ({split})"))
    else:
        click.echo(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


@cli.command()
@common_options
@click.argument("images", nargs=-1, type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--split", default="val", show_default=True)
@click.option("--output", "-o", type=click.Path(dir_okay=False), default=None,
              help="Detections file (default: stdout).")
def infer(config_path: Optional[str], seed: Optional[int], out_dir: Optional[str],
          images: Sequence[str], checkpoint: Optional[str], manifest: Optional[str], split: str,
          output: Optional[str]) -> int:
    """Detect targets; one line per detection: image_id cx cy w h theta score class_id."""
    run = _load_run(config_path, seed, out_dir)
    model = _load_model(run, config_path, checkpoint)
    if images:
        scenes = [Scene(image=read_pgm(p), id=Path(p).stem) for p in images]
    elif manifest is not None:
        scenes = load_scenes(load_manifest(manifest), split, run.synth.class_names)
    else:
        raise click.UsageError("give PGM image paths or --manifest")
    detections = detect_scenes(model, scenes, run.train.score_thresh, run.train.nms_iou,
                               run.train.workers)
    lines = [format_detection(s.id, d) for s, dets in zip(scenes, detections) for d in dets]
    text = "\n".join(lines) + ("\n" if lines else "")
    if output:
        try:
            Path(output).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot write {output}: {exc}") from exc
        _get_console(run.theme, stderr=True).print(
            f"[densetok.success]{len(lines)} detections written to {escape(output)}[/]")
    else:
        click.echo(text, nl=False)
    return EXIT_OK


@cli.command()
@common_options
@click.option("--only", multiple=True, type=click.Choice([name for name, _, _ in SUITE]),
              help="Run only the named checks.")
@click.option("--corrupt", is_flag=True, help="Perturb analytic gradients (negative control).")
def gradcheck(config_path: Optional[str], seed: Optional[int], out_dir: Optional[str],
              only: Sequence[str], corrupt: bool) -> int:
    """Finite-difference gradient checks on a tiny config; exit 3 if any check fails."""
    run = _load_run(config_path, seed, out_dir)
    con = _get_console(run.theme)
    results = run_suite(seed=run.seed, corrupt=corrupt, names=list(only) or None)
    table = Table(title="Gradient checks", title_style="densetok.header")
    table.add_column("Check", style="densetok.highlight")
    table.add_column("Coordinates", justify="right")
    table.add_column("Max rel err", style="densetok.metric", justify="right")
    table.add_column("Result")
    for r in results:
        color = level_color(r.level)
        table.add_row(r.name, str(r.coordinates), f"{r.max_rel_err:.3e}",
                      f"[{color}]{r.level.value}[/]")
    con.print(table)
    if not suite_passed(results):
        con.print("[densetok.error]Gradient check failed[/]")
        return EXIT_NUMERIC
    con.print("[densetok.success]All gradient checks passed[/]")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def main() -> None:
    cli(prog_name="densetok")


if __name__ == "__main__":
    main()
