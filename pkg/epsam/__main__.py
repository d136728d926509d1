from dotenv import load_dotenv

load_dotenv()

import dataclasses
import functools
import logging
from pathlib import Path

import click

from epsam.config import PRESET_ALIASES, PRESETS, PipelineConfig, load_config, preset_config
from epsam.errors import EpsamError
from epsam.main import run_pipeline
from epsam.models.StageManager import STAGES
from epsam.pepm import STRATEGIES
from epsam.stages import PipelineStages
from epsam.util import image_io
from epsam.util.print import print_metrics_table

DEFAULT_GRID = "0.0,0.1,0.2,0.3,0.4,0.5,0.6,0.7"


def _replace(config: PipelineConfig, section: str, **changes) -> PipelineConfig:
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return config
    return dataclasses.replace(config, **{section: dataclasses.replace(getattr(config, section), **changes)})


def handle_errors(func):
    """Maps configuration errors to exit 2 and stage failures to exit 3."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except EpsamError as e:
            click.echo(f"error: {e}", err=True)
            raise SystemExit(e.exit_code)

    return wrapper


def _config(ctx: click.Context) -> PipelineConfig:
    opts = ctx.obj
    config = load_config(opts["config_path"]) if opts["config_path"] else preset_config(opts["preset"] or "desk")
    if opts["seed"] is not None:
        config = dataclasses.replace(config, seed=opts["seed"])
    if opts["workers"] is not None:
        config = dataclasses.replace(config, workers=opts["workers"])
    config.validate()
    return config


def _run_one(ctx: click.Context, stage: str, config: PipelineConfig = None, **inputs) -> PipelineStages:
    stages = PipelineStages(config or _config(ctx), ctx.obj["out_dir"], inputs)
    stages.run_stage(stage, force=True)
    click.echo(f"{stage}: outputs under {stages.layout.root}")
    return stages


def _manifest_option(func):
    return click.option("--manifest", type=click.Path(exists=True, dir_okay=False), default=None, help="Dataset manifest.json (default: <out-dir>/data/manifest.json)")(func)


def _out_dir_option(func):
    """Per-subcommand --out-dir, overriding the group option."""

    def callback(ctx, param, value):
        if value is not None:
            ctx.obj["out_dir"] = Path(value)
        return value

    return click.option("--out-dir", "sub_out_dir", type=click.Path(file_okay=False), default=None, expose_value=False, callback=callback, help="Run directory for this stage")(func)


def _pseudo_labels_option(func):
    return click.option("--pseudo-labels", type=click.Path(exists=True, file_okay=False), default=None, help="Directory of pseudo-label masks (selftrain/iter_<n>)")(func)


@click.group()
@click.option("--config", "config_path", envvar="EPSAM_CONFIG", type=click.Path(dir_okay=False), default=None, help="JSON or YAML pipeline config")
@click.option("--preset", type=click.Choice(PRESETS + tuple(PRESET_ALIASES)), default=None, help="Preset used when no config file is given (default desk; full is an alias of paper)")
@click.option("--out-dir", envvar="EPSAM_OUT_DIR", type=click.Path(file_okay=False), default="./run", help="Run directory (default ./run)")
@click.option("--seed", envvar="EPSAM_SEED", type=int, default=None, help="Global seed override")
@click.option("--workers", envvar="EPSAM_WORKERS", type=int, default=None, help="Worker threads for per-patch work")
@click.option("--verbose", is_flag=True, default=False, help="Log at DEBUG level")
@click.pass_context
def cli(ctx, config_path, preset, out_dir, seed, workers, verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    ctx.obj = {
        "config_path": config_path,
        "preset": preset,
        "out_dir": Path(out_dir),
        "seed": seed,
        "workers": workers,
    }


@cli.command()
@_out_dir_option
@click.option("--out", "data_dir", type=click.Path(file_okay=False), default=None, help="Dataset directory (default: <out-dir>/data)")
@click.option("--seed", type=int, default=None, help="Dataset seed")
@click.option("--train", type=int, default=None, help="Training patches")
@click.option("--valid", type=int, default=None, help="Validation patches")
@click.option("--test", type=int, default=None, help="Test patches")
@click.option("--slides", type=int, default=None, help="Number of synthetic slides")
@click.option("--size", type=int, default=None, help="Patch side length")
@click.pass_context
@handle_errors
def synth(ctx, data_dir, seed, train, valid, test, slides, size):
    """Generate the synthetic dataset and its manifest."""
    config = _replace(_config(ctx), "syndata", train=train, valid=valid, test=test, slides=slides)
    if size is not None:
        config = _replace(config, "syndata", generator=dataclasses.replace(config.syndata.generator, size=size))
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    _run_one(ctx, "synth", config, data_dir=data_dir)


@cli.command("train-cam")
@_manifest_option
@_out_dir_option
@click.option("--weights", "classifier", type=click.Path(dir_okay=False), default=None, help="Where to write the classifier checkpoint")
@click.pass_context
@handle_errors
def train_cam(ctx, manifest, classifier):
    """Train the attention-dropout classifier on image-level labels."""
    _run_one(ctx, "train-cam", manifest=manifest, classifier=classifier)


@cli.command("extract-cam")
@_manifest_option
@_out_dir_option
@click.option("--weights", "--classifier", "classifier", type=click.Path(exists=True, dir_okay=False), default=None, help="Classifier checkpoint")
@click.pass_context
@handle_errors
def extract_cam(ctx, manifest, classifier):
    """Write raw and rotate-fused CAMs for every positive patch."""
    _run_one(ctx, "extract-cam", manifest=manifest, classifier=classifier)


@cli.command()
@_manifest_option
@_out_dir_option
@click.option("--cams", type=click.Path(exists=True, file_okay=False), default=None, help="Directory of fused CAMs")
@click.option("--weights", "classifier", type=click.Path(exists=True, dir_okay=False), default=None, help="Compute fused CAMs from this classifier instead of --cams")
@click.option("--q", "quantile_q", type=float, default=None, help="Quantile threshold")
@click.option("--se-radius", type=int, default=None, help="Opening structuring element radius")
@click.option("--grid", is_flag=True, default=False, help="Pick q by grid search on the validation split first")
@click.option("--grid-qs", default=DEFAULT_GRID, show_default=True, help="Comma-separated q values for --grid")
@click.pass_context
@handle_errors
def initmask(ctx, manifest, cams, classifier, quantile_q, se_radius, grid, grid_qs):
    """Threshold and open the fused CAMs into initial masks."""
    config = _replace(_config(ctx), "postproc", quantile_q=quantile_q, se_radius=se_radius)
    if grid:
        qs = [float(v) for v in grid_qs.split(",") if v.strip()]
        best_q, table = PipelineStages(config, ctx.obj["out_dir"], {"manifest": manifest, "cams": cams}).grid_search(qs)
        click.echo(f"{'q':>6}{'Dice':>10}")
        for q, dice in table:
            click.echo(f"{q:>6.2f}{100.0 * dice:>10.2f}")
        click.echo(f"best q = {best_q:.2f}")
        config = _replace(config, "postproc", quantile_q=best_q)
    _run_one(ctx, "initmask", config, manifest=manifest, cams=cams, classifier=classifier)


@cli.command()
@_manifest_option
@_out_dir_option
@click.option("--cams", "raw_cams", type=click.Path(exists=True, file_okay=False), default=None, help="Directory of raw CAMs")
@click.option("--init-masks", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--k", type=int, default=None, help="Points per patch")
@click.option("--seed", "pepm_seed", type=int, default=None, help="Point sampling seed")
@click.option("--strategy", type=click.Choice(STRATEGIES), default=None)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="Prompts JSONL file (default: <out-dir>/prompts/prompts.jsonl)")
@click.pass_context
@handle_errors
def prompts(ctx, manifest, raw_cams, init_masks, k, pepm_seed, strategy, out_path):
    """Sample point prompts for every positive patch."""
    config = _replace(_config(ctx), "pepm", k=k, seed=pepm_seed, strategy=strategy)
    _run_one(ctx, "prompts", config, manifest=manifest, raw_cams=raw_cams, init_masks=init_masks, prompts=out_path)


@cli.command("pretrain-decoder")
@_manifest_option
@_out_dir_option
@click.option("--init-masks", type=click.Path(exists=True, file_okay=False), default=None)
@_pseudo_labels_option
@click.option("--prompts", "prompts_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
@handle_errors
def pretrain_decoder(ctx, manifest, init_masks, pseudo_labels, prompts_path):
    """Fine-tune the preliminary decoder on initial masks."""
    _run_one(
        ctx, "pretrain-decoder", manifest=manifest, init_masks=init_masks, pseudo_labels=pseudo_labels, prompts=prompts_path
    )


@cli.command()
@_manifest_option
@_out_dir_option
@click.option("--init-masks", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--prompts", "prompts_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--decoder", type=click.Path(exists=True, dir_okay=False), default=None, help="Preliminary decoder checkpoint")
@click.option("--t", "threshold", type=float, default=None, help="IDS selection threshold")
@click.option("--iters", "iterations", type=int, default=None, help="Retraining iterations")
@click.option("--seed", "base_seed", type=int, default=None, help="Base seed for decoder re-initialization")
@click.pass_context
@handle_errors
def selftrain(ctx, manifest, init_masks, prompts_path, decoder, threshold, iterations, base_seed):
    """Iteratively select pseudo-labels by IDS and retrain the decoder."""
    config = _replace(_config(ctx), "selftrain", threshold=threshold, iterations=iterations, base_seed=base_seed)
    stages = _run_one(ctx, "selftrain", config, manifest=manifest, init_masks=init_masks, prompts=prompts_path, decoder=decoder)
    print_metrics_table(_trend_rows(stages))


def _trend_rows(stages: PipelineStages):
    rows = image_io.read_json(stages.layout.trends)
    return [(r["phase"], r["mean_dice"], r["mean_iou"], r["n_selected"]) for r in rows]


@cli.command()
@_manifest_option
@_out_dir_option
@click.option("--weights", "--classifier", "classifier", type=click.Path(exists=True, dir_okay=False), default=None, help="Classifier checkpoint used for gating")
@click.option("--decoder", "final_decoder", type=click.Path(exists=True, dir_okay=False), default=None, help="Final decoder checkpoint")
@click.option("--prompts", "prompts_path", type=click.Path(exists=True, dir_okay=False), default=None, help="Stored prompts used where they cover a test patch")
@click.option("--init-masks", type=click.Path(exists=True, file_okay=False), default=None, help="Initial masks for the mask prompt strategy")
@_pseudo_labels_option
@click.pass_context
@handle_errors
def infer(ctx, manifest, classifier, final_decoder, prompts_path, init_masks, pseudo_labels):
    """Classifier-gated mask prediction on the test split."""
    _run_one(
        ctx,
        "infer",
        manifest=manifest,
        classifier=classifier,
        final_decoder=final_decoder,
        prompts=prompts_path,
        init_masks=init_masks,
        pseudo_labels=pseudo_labels,
    )


@cli.command("eval")
@_manifest_option
@_out_dir_option
@click.option("--predictions", type=click.Path(exists=True, file_okay=False), default=None)
@click.pass_context
@handle_errors
def eval_command(ctx, manifest, predictions):
    """Score predictions against ground truth and write the report."""
    stages = _run_one(ctx, "eval", manifest=manifest, predictions=predictions)
    click.echo((stages.layout.report_dir / "report.txt").read_text(encoding="utf-8"))


@cli.command()
@click.option("--until", type=click.Choice(STAGES), default=None, help="Stop after this stage")
@click.option("--force", is_flag=True, default=False, help="Re-run stages even when current")
@click.pass_context
@handle_errors
def run(ctx, until, force):
    """Run the whole pipeline, resuming from completed stages."""
    report = run_pipeline(_config(ctx), ctx.obj["out_dir"], until=until, force=force)
    if report is not None:
        for name, score in report.splits.items():
            click.echo(f"{name}: Dice {score.mean_dice:.2f}  IoU {score.mean_iou:.2f}  (n={score.n})")


if __name__ == "__main__":
    cli()
