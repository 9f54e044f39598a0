"""Command-line entry point: one subcommand per pipeline stage plus run-all.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

try:
    import tomllib
except ModuleNotFoundError:                      # Python 3.10
    import tomli as tomllib

from plantscan import pipeline
from plantscan.errors import (AlignmentError, EstimationError, ParseError,
                              RegistrationError, SchemaError, StageError,
                              TrainingError, ValidationError)

_VALIDATION = (ValidationError, ParseError, SchemaError)
_RUNTIME = (StageError, TrainingError, EstimationError, AlignmentError,
            RegistrationError, OSError)


def _load_config(config_path, seed, out) -> tuple[dict, Path]:
    user = {}
    if config_path:
        with open(config_path, "rb") as fh:
            user = tomllib.load(fh)
    cfg = pipeline.merge_config(user)
    if seed is not None:
        cfg["seed"] = seed
    out_dir = Path(out) if out else Path(cfg.get("out", "run"))
    return cfg, out_dir


def _run(stage_fn, cfg, out_dir, force=False):
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        artifacts = stage_fn(cfg, out_dir, force)
    except _VALIDATION as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    except _RUNTIME as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    if artifacts:
        for a in artifacts:
            click.echo(f"wrote {out_dir / a}")
    else:
        click.echo("up to date, skipped")


def _common(fn):
    fn = click.option("--config", type=click.Path(exists=True), default=None,
                      help="TOML config file; flags override file values.")(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    fn = click.option("--out", type=click.Path(), default=None,
                      help="Output directory (default from config, else ./run).")(fn)
    return fn


@click.group()
def main():
    """Point cloud to static factory environment model."""


@main.command()
@_common
def synth(config, seed, out):
    """Generate the synthetic labelled tacts."""
    cfg, out_dir = _load_config(config, seed, out)
    _run(pipeline.stage_synth, cfg, out_dir)


@main.command()
@_common
def train(config, seed, out):
    """Train the segmentation network on the training tacts."""
    cfg, out_dir = _load_config(config, seed, out)
    _run(pipeline.stage_train, cfg, out_dir)


@main.command()
@_common
def segment(config, seed, out):
    """Segment the held-out tacts with the trained checkpoint."""
    cfg, out_dir = _load_config(config, seed, out)
    _run(pipeline.stage_segment, cfg, out_dir)


@main.command()
@_common
def uncertainty(config, seed, out):
    """Per-point uncertainty reports and retained-accuracy summary."""
    cfg, out_dir = _load_config(config, seed, out)
    _run(pipeline.stage_uncertainty, cfg, out_dir)


@main.command()
@_common
def cluster(config, seed, out):
    """Instance clustering report for the configured classes."""
    cfg, out_dir = _load_config(config, seed, out)
    _run(pipeline.stage_cluster, cfg, out_dir)


@main.command()
@_common
def pose(config, seed, out):
    """Estimate object poses on the segmented tacts."""
    cfg, out_dir = _load_config(config, seed, out)
    _run(pipeline.stage_pose, cfg, out_dir)


@main.command()
@_common
def export(config, seed, out):
    """Write the AML scene model from the estimated poses."""
    cfg, out_dir = _load_config(config, seed, out)
    _run(pipeline.stage_export, cfg, out_dir)


@main.command("run-all")
@_common
@click.option("--force", is_flag=True, help="Re-run every stage.")
def run_all(config, seed, out, force):
    """Run every stage in order, skipping fresh ones."""
    cfg, out_dir = _load_config(config, seed, out)
    try:
        pipeline.run_all(cfg, out_dir, force=force)
    except _VALIDATION as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    except _RUNTIME as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    click.echo(f"pipeline complete: {out_dir}")


@main.command()
@click.argument("measured", type=click.Path(exists=True))
@click.argument("reference", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default="run")
def quality(measured, reference, out):
    """Accuracy, completeness and density of MEASURED vs REFERENCE."""
    try:
        result = pipeline.stage_quality(measured, reference, Path(out))
    except _VALIDATION as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    except _RUNTIME as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    click.echo(f"accuracy: {result['accuracy_mm']:.3f} mm")
    click.echo(f"completeness: {result['completeness'] * 100:.1f} %")
    click.echo(f"density: {result['density']:.1f} points / 10 mm ball")


@main.command()
@_common
def savings(config, seed, out):
    """Yearly digitalization cost and automation savings."""
    from plantscan.aml import SavingsInput, compute_savings
    cfg, _ = _load_config(config, seed, out)
    sv = cfg["savings"]
    try:
        result = compute_savings(SavingsInput(
            cost_per_m2=sv["cost_per_m2"], area_per_plant=sv["area_per_plant"],
            scanned_fraction=sv["scanned_fraction"], n_plants=sv["n_plants"],
            scans_per_year=sv["scans_per_year"],
            automation_degree=sv["automation_degree"]))
    except _VALIDATION as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(f"total cost per year: {result['total_cost_per_year']:,.0f} EUR")
    click.echo(f"savings per year: {result['savings_per_year']:,.0f} EUR")


if __name__ == "__main__":
    main()
