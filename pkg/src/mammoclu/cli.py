"""Command-line entry point: ``mammoclu synth|train|eval|viz|params``."""
from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click

from .config import RunConfig
from .data_io import ValidationError, generate_phantoms


def _guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ValidationError, FileNotFoundError, OSError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
    return wrapper


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@_guard
def synth(config_path, out_dir):
    """Generate train/ and test/ phantom splits."""
    cfg = RunConfig.load(config_path)
    out = Path(out_dir)
    for split in ("train", "test"):
        pc = cfg.phantom_config(split)
        manifest = generate_phantoms(pc, out / split)
        click.echo(f"{split}: {pc.study_count} studies -> {manifest}")


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path())
@_guard
def train_cmd(config_path):
    """Train and write best/last checkpoints plus a JSON-lines log to output_dir."""
    from .harness import train

    cfg = RunConfig.load(config_path)
    ckpt = train(cfg)
    click.echo(f"best epoch {ckpt.epoch}; checkpoints in {cfg.output_dir}")


@main.command("eval")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path())
@click.option("--manifest", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@_guard
def eval_cmd(ckpt_path, manifest, out_dir):
    """Write metrics.json and roc.csv for a manifest."""
    from .harness import evaluate, load_checkpoint, report_json

    rep = evaluate(load_checkpoint(ckpt_path), manifest, out_dir)
    click.echo(report_json(rep), nl=False)


@main.command()
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path())
@click.option("--manifest", required=True, type=click.Path())
@click.option("--study", "study_id", required=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@_guard
def viz(ckpt_path, manifest, study_id, out_dir):
    """Overlay (green lesions, blue patches), cluster-map and saliency PNGs per view."""
    from .harness import load_checkpoint, visualize

    drawn = visualize(load_checkpoint(ckpt_path), study_id, manifest, out_dir)
    click.echo(json.dumps(drawn, indent=1, default=list))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@_guard
def params(config_path):
    """Trainable parameter count, total and per module."""
    from .harness import params as count

    click.echo(json.dumps(count(RunConfig.load(config_path)), indent=1))


if __name__ == "__main__":
    main()
