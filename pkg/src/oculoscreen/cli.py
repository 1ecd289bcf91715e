"""Command-line entry points wiring the pipeline together.

Every subcommand accepts --config pointing at the JSON defaults file; flags
override the file, the file overrides built-ins. Diagnostics go to stderr;
failures exit nonzero with one machine-parseable line:
``error code=<CODE> message=<...>``.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from .capture_protocol import (
    CLASS_ORDER,
    PROTOCOL_ORDER,
    CaptureSession,
    CohortLabel,
    GazeAngle,
    ImageRecord,
    QualityPolicy,
    load_manifest,
    validate_session,
)
from .classifier import (
    TrainConfig,
    grid_attribution,
    load_bundle,
    predict,
    save_bundle,
    train,
)
from .config import load_pipeline_config, with_train_overrides
from .errors import MissingAngleError, OculoscreenError
from .evaluation import cross_validate, make_folds, write_reports
from .imgio import load_image
from .synthgen import (
    DEFAULT_COHORT_COUNTS,
    PROTOCOL_RATIO_COUNTS,
    SynthConfig,
    generate_corpus,
)


def _fail(exc: OculoscreenError) -> None:
    click.echo(f"error code={exc.code} message={exc.message!r}", err=True)
    sys.exit(1)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except OculoscreenError as exc:
            _fail(exc)

    return wrapper


@click.group()
def main():
    """Eye-region screening pipeline."""


@main.command("synth-gen")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True)
@click.option("--signal", default=1.0, show_default=True, help="Cue strength s in [0, 1].")
@click.option("--noise", default=0.05, show_default=True, help="Pixel noise sigma.")
@click.option(
    "--ratios",
    type=click.Choice(["collected", "protocol"]),
    default="collected",
    show_default=True,
    help="collected = study cohort sizes; protocol = 1:1:1 negative preset.",
)
@click.option("--counts", default=None, help="Explicit COVID,PULMONARY,OCULAR,HEALTHY counts.")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@handle_errors
def synth_gen(out_dir, seed, signal, noise, ratios, counts, config_path):
    """Generate the synthetic labeled corpus."""
    pipeline = load_pipeline_config(config_path)
    if counts:
        parts = [int(x) for x in counts.split(",")]
        if len(parts) != 4:
            raise click.UsageError("--counts wants four comma-separated integers")
        n_per_cohort = {
            CohortLabel.COVID: parts[0],
            CohortLabel.PULMONARY: parts[1],
            CohortLabel.OCULAR: parts[2],
            CohortLabel.HEALTHY: parts[3],
        }
    else:
        n_per_cohort = dict(
            PROTOCOL_RATIO_COUNTS if ratios == "protocol" else DEFAULT_COHORT_COUNTS
        )
    cfg = SynthConfig(
        n_per_cohort=n_per_cohort,
        signal=signal,
        noise_sigma=noise,
        seed=seed,
        grid=pipeline.grid,
        crop_h=pipeline.crop_h,
        crop_w=pipeline.crop_w,
    )
    manifest = generate_corpus(cfg, out_dir)
    click.echo(
        f"wrote {len(manifest.sessions)} sessions "
        f"({sum(len(s.images) for s in manifest.sessions)} images) to {out_dir}"
    )


@main.command()
@click.argument("manifest_path", type=click.Path(exists=True))
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@handle_errors
def validate(manifest_path, config_path):
    """Validate a dataset manifest and every session in it.

    The manifest's own quality policy applies unless --config overrides it.
    """
    manifest = load_manifest(manifest_path)
    policy = load_pipeline_config(config_path).quality if config_path else manifest.quality_policy
    total = 0
    for session in manifest.sessions:
        violations = validate_session(session, policy, root=manifest.root)
        for v in violations:
            click.echo(f"{session.session_id}: {v} {v.message}")
        total += len(violations)
    click.echo(f"checked {len(manifest.sessions)} sessions: {total} violations")
    if total:
        sys.exit(1)


@main.command("train")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=None, type=int)
@click.option("--epochs", default=None, type=int)
@click.option("--l1", "l1_lambda", default=None, type=float)
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@handle_errors
def train_cmd(manifest_path, out_dir, seed, epochs, l1_lambda, config_path):
    """Train a model on a single stratified split (last fold held out)."""
    pipeline = load_pipeline_config(config_path)
    pipeline = with_train_overrides(pipeline, seed=seed, epochs=epochs, l1_lambda=l1_lambda)
    manifest = load_manifest(manifest_path)
    identities = [(s.identity_id, s.cohort) for s in manifest.sessions if s.cohort]
    plan = make_folds(identities, pipeline.k, pipeline.train.seed)
    val_ids = set(plan.fold_identities(pipeline.k - 1))
    train_sessions = [s for s in manifest.sessions if s.cohort and s.identity_id not in val_ids]
    val_sessions = [s for s in manifest.sessions if s.cohort and s.identity_id in val_ids]
    bundle = train(
        train_sessions,
        val_sessions,
        pipeline.train,
        root=manifest.root,
        grid=pipeline.grid,
        encoder_cfg=pipeline.encoder,
        crop_h=pipeline.crop_h,
        crop_w=pipeline.crop_w,
        cell_size=pipeline.cell_size,
    )
    save_bundle(bundle, out_dir)
    meta = bundle.training_meta
    click.echo(
        f"model {bundle.version} saved to {out_dir} "
        f"(best val loss {meta['best_val_loss']:.4f} at epoch {meta['best_epoch']})"
    )


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--k", default=None, type=int)
@click.option("--seed", default=0, show_default=True)
@click.option("--repeats", default=1, show_default=True)
@click.option("--jobs", default=1, show_default=True)
@click.option("--epochs", default=None, type=int)
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@handle_errors
def evaluate(manifest_path, out_dir, k, seed, repeats, jobs, epochs, config_path):
    """Run k-fold identity-disjoint cross-validation and write reports."""
    pipeline = load_pipeline_config(config_path)
    pipeline = with_train_overrides(pipeline, epochs=epochs)
    manifest = load_manifest(manifest_path)
    results = cross_validate(
        manifest,
        k or pipeline.k,
        seed,
        pipeline.train,
        grid=pipeline.grid,
        encoder_cfg=None,
        crop_h=pipeline.crop_h,
        crop_w=pipeline.crop_w,
        cell_size=pipeline.cell_size,
        repeats=repeats,
        jobs=jobs,
    )
    write_reports(results, out_dir)
    avg = results[0].average
    click.echo(f"reports written to {out_dir}")
    for name, value in avg.scalar_metrics().items():
        click.echo(f"  {name}: {'undefined' if value is None else f'{value:.4f}'}")


def _load_session_dir(session_dir: Path) -> CaptureSession:
    """Build a screening session from a directory of per-angle images."""
    meta_path = session_dir / "session.json"
    meta = json.loads(meta_path.read_text()) if meta_path.is_file() else {}
    images: dict[GazeAngle, ImageRecord] = {}
    for angle in PROTOCOL_ORDER:
        for ext in (".png", ".jpg", ".jpeg"):
            path = session_dir / f"{angle.value}{ext}"
            if path.is_file():
                arr = load_image(path)
                images[angle] = ImageRecord(
                    path=str(path),
                    angle=angle,
                    width=arr.shape[1],
                    height=arr.shape[0],
                )
                break
    return CaptureSession(
        session_id=session_dir.name,
        identity_id=meta.get("identity_id", session_dir.name),
        consent=bool(meta.get("consent", True)),
        images=images,
    )


@main.command()
@click.option("--model", "model_dir", required=True, type=click.Path(exists=True))
@click.option("--session", "session_dir", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@handle_errors
def screen(model_dir, session_dir, config_path):
    """Screen one session directory (ANGLE.png files) and print the result."""
    bundle = load_bundle(model_dir)
    session = _load_session_dir(Path(session_dir))
    attribution = grid_attribution(bundle, session)
    payload = attribution.prediction.to_dict()
    payload["attribution_top_cells"] = {
        angle.value: attribution.top_cells(vi, k=3)
        for vi, angle in enumerate(PROTOCOL_ORDER)
    }
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


@main.command()
@click.option("--model", "model_dir", default=None, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@handle_errors
def serve(model_dir, data_dir, host, port, config_path):
    """Start the screening HTTP service."""
    from .service import ServiceSettings, run_server

    pipeline = load_pipeline_config(config_path)
    settings = ServiceSettings(
        data_dir=Path(data_dir),
        model_dir=Path(model_dir) if model_dir else None,
        policy=pipeline.quality,
        risk_low=pipeline.risk_low,
        risk_high=pipeline.risk_high,
    )
    click.echo(f"serving on http://{host}:{port}", err=True)
    run_server(settings, host=host, port=port)


if __name__ == "__main__":
    main()
