"""Command-line entry points: corpus building, training, serving, lifting.

The studio group mirrors the HTTP service for scripted use; train and
lift3d run the long jobs directly so they work without a server.
"""

import json
from pathlib import Path

import click
import torch

from . import sds, world
from .checkpoint import load_checkpoint
from .evaluation import (
    load_oracle,
    oracle_accuracy,
    run_suite,
    save_oracle,
    train_oracle,
)
from .generation import generate, image_grid, to_png_bytes
from .latent import compose_latents
from .training import TrainConfig, run_training

torch.set_num_threads(1)


def _load_selections(text):
    """Selections come as inline JSON or as a path to a JSON file."""
    path = Path(text)
    if path.exists():
        text = path.read_text()
    obj = json.loads(text)
    if isinstance(obj, dict):
        obj = obj.get("selections", obj)
    if not isinstance(obj, list):
        raise click.BadParameter("selections must be a JSON list")
    return obj


@click.group()
def studio():
    """Creature studio over a trained checkpoint."""


@studio.command()
@click.option("--ckpt", envvar="STUDIO_CKPT", required=True,
              type=click.Path(exists=True))
@click.option("--data", envvar="STUDIO_DATA_DIR", required=True,
              type=click.Path(exists=True))
@click.option("--port", envvar="STUDIO_PORT", default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--artifacts", type=click.Path(), default=None,
              help="artifact store directory (default: beside the checkpoint)")
@click.option("--ui-dir", type=click.Path(), default=None,
              help="built frontend to serve at /")
def serve(ckpt, data, port, host, artifacts, ui_dir):
    """Run the HTTP studio service."""
    import uvicorn

    from .service import create_app

    app = create_app(ckpt, data, artifact_root=artifacts, ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=int(port))


@studio.command()
@click.option("--species", "species_count", default=12, show_default=True)
@click.option("--parts", "part_count", default=5, show_default=True)
@click.option("--instances", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def corpus(species_count, part_count, instances, seed, out):
    """Generate a species catalog and render the training corpus."""
    catalog = world.generate_species_catalog(
        species_count, part_count=part_count, seed=seed
    )
    manifest = world.build_dataset(
        catalog, out, instances_per_species=instances, seed=seed + 1
    )
    click.echo(f"{len(manifest.records)} records under {manifest.root}")


@studio.command()
@click.option("--ckpt", envvar="STUDIO_CKPT", required=True,
              type=click.Path(exists=True))
@click.option("--selection", required=True,
              help="JSON selection list (inline or a file path)")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(), default=None,
              help="write the composed latent table as JSON")
def compose(ckpt, selection, seed, out):
    """Resolve per-slot selections into a latent table."""
    bundle = load_checkpoint(ckpt)
    g = torch.Generator().manual_seed(seed)
    table = compose_latents(bundle.latent, _load_selections(selection),
                            generator=g)
    record = {
        "selections": _load_selections(selection),
        "seed": seed,
        "latents": table.tolist(),
    }
    text = json.dumps(record, indent=1)
    if out:
        Path(out).write_text(text)
        click.echo(f"wrote {out}")
    else:
        click.echo(text)


@studio.command(name="generate")
@click.option("--ckpt", envvar="STUDIO_CKPT", required=True,
              type=click.Path(exists=True))
@click.option("--selection", required=True,
              help="JSON selection list (inline or a file path)")
@click.option("--views", default="0,1,2,3", show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--guidance", default=3.0, show_default=True)
@click.option("--steps", default=50, show_default=True)
@click.option("--out", required=True, type=click.Path())
def generate_cmd(ckpt, selection, views, seed, guidance, steps, out):
    """Sample images for one composition and write PNGs plus provenance."""
    bundle = load_checkpoint(ckpt)
    sel = _load_selections(selection)
    view_list = [int(v) for v in views.split(",") if v != ""]
    result = generate(
        bundle, [sel] * len(view_list), view_list, seed=seed,
        steps=steps, guidance=guidance,
    )
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for i, v in enumerate(view_list):
        name = f"view{v}_{world.VIEW_NAMES[v]}.png"
        (out / name).write_bytes(to_png_bytes(result.images[i]))
    (out / "grid.png").write_bytes(
        to_png_bytes(image_grid(result.images, columns=len(view_list)))
    )
    (out / "provenance.json").write_text(
        json.dumps(result.provenance, indent=1)
    )
    click.echo(f"{len(view_list)} views under {out}")


def _evaluate(ckpt, data, suite, out, oracle_path, seed):
    bundle = load_checkpoint(ckpt)
    manifest = world.load_manifest(data)
    oracle = None
    if suite in ("fidelity", "diversity"):
        if oracle_path and Path(oracle_path).exists():
            oracle, _ = load_oracle(oracle_path)
        else:
            click.echo("training the oracle classifier...")
            oracle = train_oracle(manifest, seed=seed)
            acc = oracle_accuracy(oracle, manifest)
            click.echo(f"oracle held-out accuracy {acc:.3f}")
            if oracle_path:
                save_oracle(oracle_path, oracle, manifest.background)
    report = run_suite(suite, bundle, manifest, oracle=oracle, seed=seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{suite}.json"
    path.write_text(json.dumps(report, indent=1))
    if "histogram" in report:
        rows = ["species,votes"] + [
            f"{i},{v}" for i, v in enumerate(report["histogram"])
        ]
        (out / f"{suite}_histogram.csv").write_text("\n".join(rows) + "\n")
    click.echo(f"wrote {path}")
    for key, value in report.items():
        if isinstance(value, (int, float)):
            click.echo(f"  {key}: {value}")


@studio.command(name="evaluate")
@click.option("--ckpt", envvar="STUDIO_CKPT", required=True,
              type=click.Path(exists=True))
@click.option("--data", envvar="STUDIO_DATA_DIR", required=True,
              type=click.Path(exists=True))
@click.option("--suite", required=True,
              type=click.Choice(["fidelity", "diversity", "composition",
                                 "overlap", "consistency"]))
@click.option("--out", required=True, type=click.Path())
@click.option("--oracle", "oracle_path", type=click.Path(), default=None,
              help="oracle weights; trained and saved here when missing")
@click.option("--seed", default=0, show_default=True)
def evaluate_sub(ckpt, data, suite, out, oracle_path, seed):
    """Run one measurement suite and write its JSON report."""
    _evaluate(ckpt, data, suite, out, oracle_path, seed)


@click.command()
@click.option("--config", required=True, type=click.Path(exists=True),
              help="JSON file of training settings")
@click.option("--stage", required=True, type=click.Choice(["1", "2"]))
@click.option("--resume", type=click.Path(exists=True), default=None)
def train_command(config, stage, resume):
    """Train one stage from a JSON config file."""
    cfg = TrainConfig(**json.loads(Path(config).read_text()))
    path = run_training(cfg, stage=int(stage), resume=resume)
    click.echo(f"checkpoint at {path}")


@click.command()
@click.option("--ckpt", envvar="STUDIO_CKPT", required=True,
              type=click.Path(exists=True))
@click.option("--tokens", required=True, type=click.Path(exists=True),
              help="JSON with a latents table or a selections list")
@click.option("--steps", default=2000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--guidance", default=7.5, show_default=True)
@click.option("--out", required=True, type=click.Path())
def lift3d_command(ckpt, tokens, steps, seed, guidance, out):
    """Distill a composition into a voxel field plus turntable renders."""
    bundle = load_checkpoint(ckpt)
    obj = json.loads(Path(tokens).read_text())
    if "latents" in obj:
        table = torch.tensor(obj["latents"], dtype=torch.float32)
    else:
        g = torch.Generator().manual_seed(int(obj.get("seed", seed)))
        table = compose_latents(bundle.latent, obj["selections"], generator=g)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    field, history = sds.optimize_3d(
        bundle, table, steps=steps, seed=seed, guidance=guidance,
        on_log=lambda e: click.echo(
            f"step {e['step']} loss {e['loss']:.4f} window {e['t_window']}"
        ),
    )
    field.save(out / "field.npz")
    frames = sds.render_turntable(field, frames=12)
    for i in range(frames.shape[0]):
        azimuth = int(360 * i / frames.shape[0])
        (out / f"turn_{azimuth:03d}.png").write_bytes(
            to_png_bytes(frames[i])
        )
    (out / "report.json").write_text(json.dumps({
        "steps": steps, "seed": seed, "guidance": guidance,
        "history": history,
    }, indent=1))
    click.echo(f"field and {frames.shape[0]} renders under {out}")


@click.command()
@click.option("--ckpt", envvar="STUDIO_CKPT", required=True,
              type=click.Path(exists=True))
@click.option("--data", envvar="STUDIO_DATA_DIR", required=True,
              type=click.Path(exists=True))
@click.option("--suite", required=True,
              type=click.Choice(["fidelity", "diversity", "composition",
                                 "overlap", "consistency"]))
@click.option("--out", required=True, type=click.Path())
@click.option("--oracle", "oracle_path", type=click.Path(), default=None)
@click.option("--seed", default=0, show_default=True)
def evaluate_command(ckpt, data, suite, out, oracle_path, seed):
    """Standalone mirror of `studio evaluate`."""
    _evaluate(ckpt, data, suite, out, oracle_path, seed)
