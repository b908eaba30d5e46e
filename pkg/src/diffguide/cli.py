"""Command-line entry points.

Every subcommand takes an optional YAML config plus repeatable
``--set key=value`` overrides; weight locations and the retrieval endpoint
can also come from environment variables.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click

from . import __version__
from .config import load_config
from .grids import emit_grid, emit_study_bundle

RETRIEVAL_ENV = "DIFFGUIDE_RETRIEVAL_ENDPOINT"

log = logging.getLogger("diffguide")


def _common_config(task, config, set_, output_dir, seeds):
    overrides = list(set_)
    cfg = load_config(config, task=task, overrides=overrides)
    if output_dir:
        cfg.output_dir = output_dir
    if seeds:
        cfg.seeds = [int(s) for s in seeds.split(",")]
    cfg.validate()
    return cfg


@click.group()
@click.version_option(version=__version__)
@click.option("--verbose", is_flag=True, default=False)
def main(verbose):
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


_config_opt = click.option("--config", type=click.Path(exists=True), default=None,
                           help="YAML task configuration.")
_set_opt = click.option("--set", "set_", multiple=True, metavar="KEY=VALUE",
                        help="Override any config field by dotted path.")
_outdir_opt = click.option("--output-dir", default=None, help="Run directory.")
_seeds_opt = click.option("--seeds", default=None, help="Comma-separated run seeds.")


@main.command()
@_config_opt
@_set_opt
@_outdir_opt
@_seeds_opt
@click.option("--classname", default=None, help="Target class name.")
def disagree(config, set_, output_dir, seeds, classname):
    """Generate images maximizing the confidence gap between two classifiers."""
    from .pipelines import run_disagreement

    cfg = _common_config("disagreement", config, set_, output_dir, seeds)
    if classname:
        cfg.classname = classname
    cfg.validate()
    manifest = run_disagreement(cfg)
    click.echo(f"wrote {manifest.out_dir / manifest.NAME}")


@main.command()
@_config_opt
@_set_opt
@_outdir_opt
@_seeds_opt
@click.option("--neuron-index", type=int, default=None)
@click.option("--sign", type=click.Choice(["maximize", "minimize", "both"]), default=None)
@click.option("--classname", default=None, help="Prompt class name.")
def neuron(config, set_, output_dir, seeds, neuron_index, sign, classname):
    """Visualize a penultimate-layer neuron by optimizing its activation."""
    from .pipelines import run_neuron

    cfg = _common_config("neuron", config, set_, output_dir, seeds)
    if neuron_index is not None:
        cfg.neuron.index = neuron_index
    if sign:
        cfg.neuron.sign = sign
    if classname:
        cfg.neuron.classname = classname
    cfg.validate()
    manifest = run_neuron(cfg)
    click.echo(f"wrote {manifest.out_dir / manifest.NAME}")


@main.command()
@_config_opt
@_set_opt
@_outdir_opt
@_seeds_opt
@click.option("--source-class", default=None)
@click.option("--target-class", default=None)
@click.option("--image", "image_path", type=click.Path(exists=True), default=None,
              help="Input image (defaults to a sampled toy image of the source class).")
def uvce(config, set_, output_dir, seeds, source_class, target_class, image_path):
    """Produce a visual counterfactual for an input image."""
    from .pipelines import run_uvce

    cfg = _common_config("uvce", config, set_, output_dir, seeds)
    if source_class:
        cfg.uvce.source_class = source_class
    if target_class:
        cfg.uvce.target_class = target_class
    if image_path:
        cfg.uvce.image_path = image_path
    cfg.validate()
    manifest = run_uvce(cfg)
    click.echo(f"wrote {manifest.out_dir / manifest.NAME}")


@main.command()
@click.option("--query", required=True)
@click.option("-k", type=int, default=5)
@click.option("--endpoint", default=None, help=f"Retrieval endpoint (or ${RETRIEVAL_ENV}).")
@click.option("--out", type=click.Path(), default=None, help="Write the result JSON here.")
def retrieve(query, k, endpoint, out):
    """Query an external image-retrieval service for validation images."""
    from .pipelines import retrieval_validate

    endpoint = endpoint or os.environ.get(RETRIEVAL_ENV)
    result = retrieval_validate(query, k=k, endpoint=endpoint)
    text = json.dumps(result, indent=2)
    if out:
        Path(out).write_text(text)
    click.echo(text)


@main.command()
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), required=True)
@click.option("--layout", default=None, help="ROWSxCOLS, e.g. 2x2.")
@click.option("--out", type=click.Path(), default=None)
@click.option("--study", is_flag=True, default=False,
              help="Blinded A/B bundle over counterfactual pairs.")
@click.option("--seed", type=int, default=0, help="Assignment seed for study mode.")
def grid(manifest_path, layout, out, study, seed):
    """Render a manifest's images into a composite grid file."""
    manifest_path = Path(manifest_path)
    with open(manifest_path) as fh:
        data = json.load(fh)
    base = manifest_path.parent
    out_path = Path(out) if out else base / ("study.png" if study else "grid_cli.png")

    if study:
        files = data["files"]
        originals = sorted(n for n, m in files.items() if m.get("kind") == "original")
        examples = []
        for orig in originals:
            examples.append(
                {
                    "original": orig,
                    "method_a": orig.replace("original", "uvce"),
                    "method_b": orig.replace("original", "baseline"),
                }
            )
        bundle = emit_study_bundle(examples, out_path, seed=seed, base_dir=base)
        click.echo(json.dumps({"file": str(out_path), "seed": bundle["seed"]}))
        return

    images = [n for n, m in sorted(data["files"].items()) if n.endswith(".png") and m.get("kind") != "grid"]
    entries = [{"file": n, "label": n} for n in images]
    if layout:
        rows, cols = (int(v) for v in layout.lower().split("x"))
    else:
        cols = min(len(entries), 6)
        rows = (len(entries) + cols - 1) // cols
    emit_grid(entries, (rows, cols), out_path, base_dir=base)
    click.echo(str(out_path))


@main.command("toy-train")
@click.option("--seed", type=int, default=0)
@click.option("--component", type=click.Choice(["all", "denoiser", "classifiers"]), default="all")
@click.option("--fresh", is_flag=True, default=False, help="Ignore cached weights.")
def toy_train(seed, component, fresh):
    """Train (or load) the desk-scale backend stack and print its metrics."""
    from .adapters.toy_training import (
        load_toy_stack,
        make_toy_pair,
        train_toy_denoiser,
    )
    from .adapters.toy_world import ToyWorld
    from .diffusion import make_schedule

    use_cache = not fresh
    if component == "all":
        stack = load_toy_stack(seed=seed, use_cache=use_cache, verbose=True)
        click.echo(
            f"stack ready: denoiser latent {stack.denoiser.latent_shape}, "
            f"{stack.classifier_shape.num_classes} classes"
        )
    elif component == "denoiser":
        world = ToyWorld(seed=seed)
        train_toy_denoiser(world, make_schedule(20, "cosine"), seed=seed,
                           use_cache=use_cache, verbose=True)
        click.echo("denoiser ready")
    else:
        world = ToyWorld(seed=seed)
        make_toy_pair(world, seed=seed, use_cache=use_cache, verbose=True)
        click.echo("classifier pair ready")


if __name__ == "__main__":
    main()
