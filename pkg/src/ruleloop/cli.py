"""Command-line interface.

Workspace layout: images/ (content-addressed store), manifest.jsonl +
images.jsonl, runs/<run_id>/ (journals, round state, train manifests),
reports/<run_id>/ (delimited tables plus rendered figures).

Exit codes: 0 success, 1 validation error, 2 transport error.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .config import ConfigError, RunConfig
from .dataset import ImageStore, InsufficientImages, Manifest, split as split_manifest
from .dataset import ingest_directory
from .loop import AnnotationTimeout
from .metrics import emit_report
from .model import TransportError
from .rules import CurationViolation, SchemaError, load_registry
from .session import RunSession
from .synthetic import synthetic_manifest
from .trainer import EmptyPool, TrainerFailed, TrainerUnavailable

VALIDATION_ERRORS = (
    ConfigError,
    SchemaError,
    CurationViolation,
    InsufficientImages,
    EmptyPool,
    FileNotFoundError,
    ValueError,
)
TRANSPORT_ERRORS = (TransportError, TrainerUnavailable, TrainerFailed, AnnotationTimeout)


def _guard(fn):
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except TRANSPORT_ERRORS as exc:
            click.echo(f"transport error: {exc}", err=True)
            sys.exit(2)
        except VALIDATION_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@click.group()
def main():
    """Rule-grounded visual compliance assessment pipeline."""


@main.command()
@click.option("--workspace", "-w", default="workspace", type=click.Path(path_type=Path))
@click.option("--traffic", default=0, type=int, help="Scene count for the traffic domain.")
@click.option("--construction", default=0, type=int)
@click.option("--warehouse", default=0, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--duplicates", default=0, type=int, help="Near-duplicates per scene.")
@click.option("--render/--virtual", default=True,
              help="Render pixel data (required for runs) or metadata only.")
@_guard
def synth(workspace, traffic, construction, warehouse, seed, duplicates, render):
    """Generate a synthetic corpus and write its manifest."""
    counts = {}
    for domain, count in (("traffic", traffic), ("construction", construction),
                          ("warehouse", warehouse)):
        if count > 0:
            counts[domain] = count
    if not counts:
        raise ConfigError("no image counts given; use --traffic/--construction/--warehouse")
    registry = load_registry()
    store = ImageStore(workspace) if render else None
    manifest = synthetic_manifest(registry, counts, seed, store=store,
                                  duplicates_per_scene=duplicates)
    manifest.save(workspace / "manifest.jsonl")
    click.echo(f"wrote {len(manifest.samples)} samples "
               f"({len(manifest.images)} images) to {workspace}")


@main.command()
@click.argument("source", type=click.Path(exists=True, path_type=Path))
@click.option("--workspace", "-w", default="workspace", type=click.Path(path_type=Path))
@click.option("--d-dup", default=4, type=int, help="Near-duplicate Hamming distance.")
@click.option("--workers", default=4, type=int)
@_guard
def ingest(source, workspace, d_dup, workers):
    """Preprocess, dedup and manifest a directory of raw images."""
    registry = load_registry()
    store = ImageStore(workspace)
    manifest = ingest_directory(source, store, registry, d_dup=d_dup, workers=workers)
    manifest.save(Path(workspace) / "manifest.jsonl")
    click.echo(f"ingested {len(manifest.images)} images -> {len(manifest.samples)} samples")


@main.command("split")
@click.option("--workspace", "-w", default="workspace", type=click.Path(path_type=Path))
@click.option("--seed", default=0, type=int)
@click.option("--val", default=100, type=int, help="Validation images per domain.")
@click.option("--test", default=100, type=int, help="Test images per domain.")
@_guard
def split_cmd(workspace, seed, val, test):
    """Assign stratified train/val/test splits to the manifest."""
    manifest_path = Path(workspace) / "manifest.jsonl"
    manifest = Manifest.load(manifest_path)
    manifest = split_manifest(manifest, seed=seed, val_images=val, test_images=test)
    manifest.save(manifest_path)
    counts = manifest.counts()
    for key in sorted(counts):
        click.echo(f"{key[0]}/{key[1]}: {counts[key]}")


@main.command()
@click.option("--config", "-c", "config_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--workspace", "-w", default="workspace", type=click.Path(path_type=Path))
@click.option("--run-id", default=None)
@click.option("--rounds", default=None, type=int,
              help="Rounds to execute (default: one per configured increment).")
@click.option("--no-human", is_flag=True,
              help="Resolve weak samples as discounted pseudo-labels.")
@_guard
def run(config_path, workspace, run_id, rounds, no_human):
    """Execute active-learning rounds in batch mode."""
    config = RunConfig.from_file(config_path)
    if no_human:
        config = RunConfig.from_dict({**config.to_dict(), "human": "none"})
    if config.human == "queue":
        raise ConfigError("queue mode needs the service; use `serve`, or set human=auto/none")
    run_id = run_id or f"run-{config.seed}"
    session = RunSession(run_id, config, workspace)
    total = rounds if rounds is not None else len(config.increments)
    annotator = session.default_annotator()
    for _ in range(total):
        if not session.state.pool_unprobed:
            break
        session.run_label_round(annotator)
        record = session.state.history[-1]
        click.echo(
            f"round {record.round}: probed {record.probed}, weak {record.weak}, "
            f"manual {record.num_manual} (cum {record.accum_manual}), "
            f"pseudo cum {record.accum_pseudo}"
        )
    saving = session.savings()
    click.echo(f"annotation saved: {saving.saved_percent}% "
               f"({saving.n_pseudo}/{saving.n_total} pseudo)")


@main.command()
@click.option("--workspace", "-w", default="workspace", type=click.Path(path_type=Path))
@click.option("--port", default=8000, type=int)
@click.option("--host", default="127.0.0.1")
@click.option("--console", default=None, type=click.Path(path_type=Path),
              help="Directory of built console assets to serve at /.")
@_guard
def serve(workspace, port, host, console):
    """Run the annotation service (API plus console assets)."""
    import uvicorn

    from .service import create_app

    app = create_app(workspace, console_dir=console)
    uvicorn.run(app, host=host, port=port, log_level="info")


@main.command()
@click.option("--config", "-c", "config_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--workspace", "-w", default="workspace", type=click.Path(path_type=Path))
@click.option("--split", "split_name", default="test",
              type=click.Choice(["train", "val", "test"]))
@click.option("--strict", is_flag=True, help="Count uncovered samples as wrong.")
@_guard
def evaluate(config_path, workspace, split_name, strict):
    """Evaluate the configured model on a split and print the report."""
    config = RunConfig.from_file(config_path)
    session = RunSession(f"eval-{split_name}", config, workspace)
    report = session.evaluate_split(split_name, strict=strict)
    click.echo(json.dumps(report.to_dict(), indent=2, sort_keys=True))


@main.command()
@click.argument("run_id")
@click.option("--workspace", "-w", default="workspace", type=click.Path(path_type=Path))
@_guard
def report(run_id, workspace):
    """Emit round tables, embeddings export and figures for a completed run."""
    workspace = Path(workspace)
    run_dir = workspace / "runs" / run_id
    rounds = sorted(run_dir.glob("round_*.json"))
    if not rounds:
        raise ConfigError(f"run {run_id} has no completed rounds")
    from .service import RunManager

    manager = RunManager(workspace)
    handle = manager.restore_run(run_id)
    session = handle.session
    rows = session.report_rows()
    if not rows:
        raise ConfigError(f"run {run_id} has no reportable rounds")
    out_dir = workspace / "reports" / run_id
    written = emit_report(rows, out_dir, embeddings=session.embeddings_export())
    for path in written:
        click.echo(str(path))


TABLE_PRESET = {
    "images_per_domain": 1000,
    "val": 100,
    "test": 100,
    "seed": 17,
    "budget": 1500,
    "increments": [1500, 500, 1000, 1000],
    "theta": 0.7,
    "accuracy": 0.6,
}


@main.command()
@click.option("--preset", default="tableV", type=click.Choice(["tableV", "small"]))
@click.option("--workspace", "-w", default="workspace", type=click.Path(path_type=Path))
@_guard
def simulate(preset, workspace):
    """Full deterministic end-to-end demo on a synthetic corpus."""
    workspace = Path(workspace)
    params = dict(TABLE_PRESET)
    domains = ["traffic", "construction", "warehouse"]
    if preset == "small":
        params.update(images_per_domain=40, val=10, test=10, budget=60,
                      increments=[60, 40], seed=5)
        domains = ["warehouse"]

    registry = load_registry()
    store = ImageStore(workspace)
    counts = {d: params["images_per_domain"] for d in domains}
    manifest = synthetic_manifest(registry, counts, params["seed"], store=store)
    manifest = split_manifest(manifest, seed=params["seed"],
                              val_images=params["val"], test_images=params["test"])
    manifest.save(workspace / "manifest.jsonl")
    click.echo(f"corpus: {len(manifest.images)} images, {len(manifest.samples)} samples")

    for domain in domains:
        config = RunConfig.from_dict(
            {
                "manifest": "manifest.jsonl",
                "domain": domain,
                "seed": params["seed"],
                "theta": params["theta"],
                "budget": params["budget"],
                "increments": params["increments"],
                "human": "auto",
                "model": {"type": "simulated", "seed": params["seed"],
                          "accuracy": params["accuracy"]},
                "trainer": {"kind": "simulated", "a_max": 0.95, "k": 1e-3},
            }
        )
        run_id = f"{preset}-{domain}"
        session = RunSession(run_id, config, workspace, registry=registry, clock=None)
        annotator = session.default_annotator()
        for _ in config.increments:
            if not session.state.pool_unprobed:
                break
            session.run_label_round(annotator)
        rows = session.report_rows()
        out_dir = workspace / "reports" / run_id
        emit_report(rows, out_dir, embeddings=session.embeddings_export(),
                    final_eval=session.evaluate_split("test"))
        saving = session.savings()
        click.echo(f"{domain}: saved {saving.saved_percent}% "
                   f"({saving.n_human} manual / {saving.n_pseudo} pseudo), "
                   f"report -> {out_dir}")


if __name__ == "__main__":
    main()
