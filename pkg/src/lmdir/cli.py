"""Command line entry points.

Exit codes: 0 success, 1 domain error (message on stderr), 2 usage error.
Environment overrides: LMDIR_CHECKPOINT, LMDIR_BUNDLE_ROOT,
LMDIR_PROVIDER_MODE.
"""

from __future__ import annotations

import dataclasses
import functools
import sys
from pathlib import Path

import click

from .bundles import BundleStore, PriorBuilder
from .errors import CheckpointCorrupt, LmdirError
from .evaluation import export_embeddings, noise_suite, psnr, run_suite
from .images import load_image, quantized, save_image
from .network import NetworkConfig, load_model
from .providers import ProviderConfig, providers_for
from .training import (
    TASK_IDS,
    desk_profile,
    materialize_degraded,
    paper_profile,
    tasks_from_root,
    train,
)

EXIT_DOMAIN_ERROR = 1


def domain_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except LmdirError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_DOMAIN_ERROR)

    return wrapper


def provider_options(fn):
    for option in (
        click.option(
            "--provider-mode",
            envvar="LMDIR_PROVIDER_MODE",
            type=click.Choice(["fixture", "live"]),
            default="fixture",
            show_default=True,
            help="Offline fixture providers or live HTTP endpoints.",
        ),
        click.option("--mllm-endpoint", default=None),
        click.option("--text-endpoint", default=None),
        click.option("--diffusion-endpoint", default=None),
    ):
        fn = option(fn)
    return fn


def _providers(provider_mode, mllm_endpoint, text_endpoint, diffusion_endpoint):
    if provider_mode == "fixture":
        return providers_for(ProviderConfig.fixture())
    missing = [
        name
        for name, value in (
            ("--mllm-endpoint", mllm_endpoint),
            ("--text-endpoint", text_endpoint),
            ("--diffusion-endpoint", diffusion_endpoint),
        )
        if not value
    ]
    if missing:
        raise click.UsageError(f"live mode requires {', '.join(missing)}")
    return providers_for(
        ProviderConfig(
            mllm_endpoint=mllm_endpoint,
            text_encoder_endpoint=text_endpoint,
            diffusion_endpoint=diffusion_endpoint,
        )
    )


def _load_checkpoint(checkpoint, profile=None):
    if not checkpoint:
        raise CheckpointCorrupt(
            "no checkpoint given: pass --checkpoint or set LMDIR_CHECKPOINT"
        )
    expect = None
    if profile is not None:
        expect = NetworkConfig.tiny() if profile == "desk" else NetworkConfig()
    network, _, _ = load_model(checkpoint, expect_config=expect)
    return network


def _input_images(input_path: Path) -> list[Path]:
    if input_path.is_dir():
        return sorted(input_path.glob("*.png"))
    return [input_path]


@click.group()
@click.version_option(package_name="lmdir")
def main():
    """Language-guided multiple-in-one image restoration."""


@main.command("prior-gen")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--bundle-root", envvar="LMDIR_BUNDLE_ROOT", required=True, type=click.Path(path_type=Path))
@click.option("--seed", default=0, show_default=True)
@provider_options
@domain_errors
def prior_gen(input_path, bundle_root, seed, **provider_opts):
    """Build (or reuse cached) prior bundles for an image or a directory."""
    providers = _providers(**provider_opts)
    builder = PriorBuilder(BundleStore(bundle_root), providers)
    for path in _input_images(input_path):
        bundle = builder.build(load_image(path), seed=seed)
        click.echo(f"{bundle.image_id}  {path}")


@main.command("train")
@click.option("--data-root", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--bundle-root", envvar="LMDIR_BUNDLE_ROOT", required=True, type=click.Path(path_type=Path))
@click.option("--checkpoint", envvar="LMDIR_CHECKPOINT", required=True, type=click.Path(path_type=Path))
@click.option("--profile", type=click.Choice(["desk", "paper"]), default="desk", show_default=True)
@click.option("--tasks", default=",".join(TASK_IDS), show_default=True)
@click.option("--paired", is_flag=True, help="Degraded images are provided, skip synthesis.")
@click.option("--iters", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--crop", type=int, default=None)
@click.option("--batch", type=int, default=None)
@click.option("--seed", default=0, show_default=True)
@click.option("--resume", type=click.Path(path_type=Path), default=None)
@click.option("--log", "log_path", type=click.Path(path_type=Path), default=None)
@click.option("--log-every", default=50, show_default=True)
@click.option("--checkpoint-every", default=100, show_default=True)
@provider_options
@domain_errors
def train_cmd(
    data_root, bundle_root, checkpoint, profile, tasks, paired,
    iters, lr, crop, batch, seed, resume, log_path, log_every,
    checkpoint_every, **provider_opts,
):
    """Train on the task directories under --data-root."""
    providers = _providers(**provider_opts)
    task_ids = tuple(t.strip() for t in tasks.split(",") if t.strip())
    specs = tasks_from_root(data_root, task_ids, paired=paired)
    builder = PriorBuilder(BundleStore(bundle_root), providers)
    for spec in specs:
        if not paired:
            written = materialize_degraded(spec, seed=seed)
            if written:
                click.echo(f"{spec.task_id}: materialized {written} degraded images")
        for path in sorted((spec.dataset_root / "degraded").glob("*.png")):
            builder.build(load_image(path), seed=seed)
    make_profile = desk_profile if profile == "desk" else paper_profile
    config, network_config = make_profile(specs, bundle_root, seed=seed)
    overrides = {
        k: v
        for k, v in (("iters", iters), ("lr", lr), ("crop", crop), ("batch", batch))
        if v is not None
    }
    if overrides:
        config = dataclasses.replace(config, **overrides)
    state = train(
        config,
        network_config,
        resume_from=resume,
        checkpoint_path=checkpoint,
        checkpoint_every=checkpoint_every,
        log_path=log_path,
        log_every=log_every,
    )
    click.echo(
        f"trained {state.step} steps, running L1 {state.running_loss:.4f}, "
        f"checkpoint {checkpoint}"
    )


@main.command("eval")
@click.option("--clean-root", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--bundle-root", envvar="LMDIR_BUNDLE_ROOT", required=True, type=click.Path(path_type=Path))
@click.option("--checkpoint", envvar="LMDIR_CHECKPOINT", default=None, type=click.Path(path_type=Path))
@click.option("--baseline", is_flag=True, help="Score the degraded input itself.")
@click.option("--suite", default="denoise", show_default=True)
@click.option("--sigmas", default="60,75", show_default=True)
@click.option("--out", "out_dir", default="eval-out", show_default=True, type=click.Path(path_type=Path))
@click.option("--profile", type=click.Choice(["desk", "paper"]), default=None)
@provider_options
@domain_errors
def eval_cmd(
    clean_root, bundle_root, checkpoint, baseline, suite, sigmas,
    out_dir, profile, **provider_opts,
):
    """Run a noise severity suite and write the report."""
    providers = _providers(**provider_opts)
    model = None if baseline or not checkpoint else _load_checkpoint(checkpoint, profile)
    spec = noise_suite(clean_root, tuple(float(s) for s in sigmas.split(",")), suite=suite)
    report = run_suite(model, spec, bundle_root, providers=providers)
    click.echo(report.text_table())
    report.save(out_dir)
    click.echo(f"report written to {out_dir}")


@main.command()
@click.option("--input", "input_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--output", "output_path", required=True, type=click.Path(path_type=Path))
@click.option("--bundle-root", envvar="LMDIR_BUNDLE_ROOT", default="bundles", show_default=True, type=click.Path(path_type=Path))
@click.option("--instruction", default=None, help="Guided mode degradation description.")
@click.option("--checkpoint", envvar="LMDIR_CHECKPOINT", default=None, type=click.Path(path_type=Path))
@click.option("--profile", type=click.Choice(["desk", "paper"]), default=None)
@click.option("--ground-truth", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--seed", default=0, show_default=True)
@provider_options
@domain_errors
def restore(
    input_path, output_path, bundle_root, instruction, checkpoint,
    profile, ground_truth, seed, **provider_opts,
):
    """Restore one image, automatically or per instruction."""
    providers = _providers(**provider_opts)
    network = _load_checkpoint(checkpoint, profile)
    image = quantized(load_image(input_path))
    builder = PriorBuilder(BundleStore(bundle_root), providers)
    bundle = builder.build(image, seed=seed)
    override = providers.encode_text(instruction).tokens if instruction else None
    restored = network.restore(image, bundle, degradation_text=override)
    save_image(restored, output_path)
    click.echo(f"wrote {output_path}")
    click.echo(f"degradation prior: {bundle.texts.degradation_text}")
    if ground_truth is not None:
        truth = load_image(ground_truth)
        before = psnr(image, truth)
        after = psnr(restored, truth)
        click.echo(
            f"PSNR {before:.2f} dB -> {after:.2f} dB (gain {after - before:+.2f} dB)"
        )


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.option("--bundle-root", envvar="LMDIR_BUNDLE_ROOT", required=True, type=click.Path(path_type=Path))
@click.option("--checkpoint", envvar="LMDIR_CHECKPOINT", default=None, type=click.Path(path_type=Path))
@click.option("--profile", type=click.Choice(["desk", "paper"]), default=None)
@click.option("--ui", "ui_dir", type=click.Path(exists=True, path_type=Path), default=None, help="Static frontend directory to mount at /.")
@click.option("--session-cap", default=64, show_default=True)
@click.option("--session-ttl", default=3600.0, show_default=True)
@provider_options
@domain_errors
def serve(
    host, port, bundle_root, checkpoint, profile, ui_dir,
    session_cap, session_ttl, **provider_opts,
):
    """Serve the restoration HTTP API (and optionally the UI)."""
    import uvicorn

    from .service import create_app

    providers = _providers(**provider_opts)
    network = _load_checkpoint(checkpoint, profile)
    app = create_app(
        network,
        providers,
        BundleStore(bundle_root),
        session_cap=session_cap,
        ttl_seconds=session_ttl,
    )
    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")
    uvicorn.run(app, host=host, port=port)


@main.command("export-embeddings")
@click.option("--data-root", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--bundle-root", envvar="LMDIR_BUNDLE_ROOT", required=True, type=click.Path(path_type=Path))
@click.option("--checkpoint", envvar="LMDIR_CHECKPOINT", default=None, type=click.Path(path_type=Path))
@click.option("--profile", type=click.Choice(["desk", "paper"]), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path))
@click.option("--tasks", default=",".join(TASK_IDS), show_default=True)
@click.option("--limit", default=0, show_default=True, help="Max images per task (0 = all).")
@click.option("--seed", default=0, show_default=True)
@provider_options
@domain_errors
def export_embeddings_cmd(
    data_root, bundle_root, checkpoint, profile, out_dir, tasks,
    limit, seed, **provider_opts,
):
    """Export e_d / I_d / pooled Z_d vectors for external projection."""
    providers = _providers(**provider_opts)
    network = _load_checkpoint(checkpoint, profile)
    builder = PriorBuilder(BundleStore(bundle_root), providers)
    items = []
    for task_id in (t.strip() for t in tasks.split(",") if t.strip()):
        paths = sorted((Path(data_root) / task_id / "degraded").glob("*.png"))
        if limit:
            paths = paths[:limit]
        for path in paths:
            image = load_image(path)
            items.append((image, builder.build(image, seed=seed), task_id))
    rows = export_embeddings(network, items, out_dir)
    click.echo(f"exported {len(rows)} rows to {out_dir}")


if __name__ == "__main__":
    main()
