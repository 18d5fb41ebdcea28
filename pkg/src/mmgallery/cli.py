"""Command-line interface.

Experiment knobs resolve as flags > ``MMGALLERY_*`` environment variables >
config file > built-in defaults. Commands that emit a report table also
render PNG figures next to the delimited output.

Exit codes: 0 success, 1 pipeline error, 2 usage error.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click

from .captioner import DescriptionCache
from .config import load_config_file, resolve_experiment
from .errors import MMGalleryError
from .figures import plot_confusion, render_grid_figures
from .gallery import load_gallery, save_gallery
from .harness import (
    DEFAULT_SHOTS,
    SWEEP_PARAMETERS,
    backends_from_config,
    build_support_gallery,
    evaluate,
    run_ablation,
    sweep,
)
from .manifest import load_manifest
from .pipeline import ABLATION_MODES, QueryPipeline, make_captioner
from .retrieval import RetrievalConfig
from .server import GalleryService, serve
from .synth import SynthWorldConfig, generate_world

logger = logging.getLogger(__name__)


def _friendly(fn):
    """Map pipeline errors to exit code 1 with a clean message."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except MMGalleryError as exc:
            raise click.ClickException(f"{type(exc).__name__}: {exc}") from exc

    return wrapper


@click.group()
@click.option("--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose: bool) -> None:
    """Few-shot image classification by multimodal template retrieval."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )


def _knob_options(fn):
    """Experiment knobs shared by the gallery-building commands."""
    for option in reversed(
        [
            click.option("--shots", type=int, default=None, help="Support samples per class."),
            click.option("--t", "t", type=int, default=None, help="Reference images per caption."),
            click.option("--s", "s", type=int, default=None, help="Regions per description."),
            click.option("--beta", type=float, default=None, help="Affinity sharpness."),
            click.option(
                "--aggregation",
                type=click.Choice(["class-sum", "nearest"]),
                default=None,
                help="How per-entry affinities become class scores.",
            ),
            click.option(
                "--mode",
                type=click.Choice(list(ABLATION_MODES)),
                default=None,
                help="Input composition mode.",
            ),
            click.option("--seed", type=int, default=None, help="Episode seed."),
            click.option("--cache", "cache_path", type=click.Path(), default=None, help="Description cache JSONL."),
            click.option("--max-in-flight", type=int, default=None, help="Concurrent caption requests."),
        ]
    ):
        fn = option(fn)
    return fn


def _config_arg(fn):
    return click.option(
        "--config",
        "config_path",
        type=click.Path(exists=True, dir_okay=False),
        required=True,
        help="YAML config with encoder/chat descriptors.",
    )(fn)


def _manifest_option(fn):
    return click.option(
        "--manifest",
        "manifest_path",
        type=click.Path(exists=True, dir_okay=False),
        default=None,
        help="Dataset manifest JSONL (default: manifest.jsonl beside the config).",
    )(fn)


def _resolve(config_path: str, **flags):
    file_cfg = load_config_file(config_path)
    return resolve_experiment(file_cfg, None, **flags)


def _manifest_for(config_path: str, manifest_path: str | None):
    if manifest_path is None:
        manifest_path = str(Path(config_path).parent / "manifest.jsonl")
    return load_manifest(manifest_path)


def _echo_json(payload) -> None:
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


# --- dataset synthesis -------------------------------------------------------


@cli.command()
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--classes", type=int, default=10, show_default=True)
@click.option("--k-train", type=int, default=16, show_default=True)
@click.option("--n-test", type=int, default=20, show_default=True)
@click.option("--family-size", type=int, default=2, show_default=True)
@click.option("--shared-tokens", type=int, default=2, show_default=True)
@click.option("--attrs-per-class", type=int, default=4, show_default=True)
@click.option("--family-spread", type=float, default=0.25, show_default=True)
@click.option("--image-noise", type=float, default=0.0, show_default=True)
@click.option("--hallucination", type=float, default=0.0, show_default=True)
@click.option("--genericity", type=float, default=0.0, show_default=True)
@click.option("--image-dim", type=int, default=16, show_default=True)
@click.option("--vocab-size", type=int, default=64, show_default=True)
@click.option("--superclass", default="specimen", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@_friendly
def synth(out_dir: str, **kwargs) -> None:
    """Generate a synthetic dataset directory with a ready config.yaml."""
    cfg = SynthWorldConfig(
        classes=kwargs["classes"],
        k_train=kwargs["k_train"],
        n_test=kwargs["n_test"],
        family_size=kwargs["family_size"],
        shared_tokens=kwargs["shared_tokens"],
        attrs_per_class=kwargs["attrs_per_class"],
        family_spread=kwargs["family_spread"],
        image_noise=kwargs["image_noise"],
        hallucination_rate=kwargs["hallucination"],
        genericity_rate=kwargs["genericity"],
        image_dim=kwargs["image_dim"],
        vocab_size=kwargs["vocab_size"],
        superclass=kwargs["superclass"],
        seed=kwargs["seed"],
    )
    world = generate_world(cfg)
    paths = world.write(out_dir)
    click.echo(
        f"wrote {cfg.classes} classes x ({cfg.k_train} train + {cfg.n_test} test)"
    )
    for name, path in paths.items():
        click.echo(f"  {name}: {path}")


# --- gallery lifecycle -------------------------------------------------------


@cli.command("build-gallery")
@_config_arg
@_manifest_option
@_knob_options
@click.option(
    "--out",
    "out_path",
    type=click.Path(dir_okay=False),
    required=True,
    help="Where to write the gallery file.",
)
@_friendly
def build_gallery_cmd(config_path, manifest_path, out_path, **flags) -> None:
    """Build a support gallery from the manifest's train split."""
    cfg = _resolve(config_path, **flags)
    manifest = _manifest_for(config_path, manifest_path)
    gallery, _, _, shortfall = build_support_gallery(cfg, manifest)
    save_gallery(gallery, out_path)
    click.echo(
        f"gallery: {len(gallery)} entries, {gallery.metadata.c} classes -> "
        f"{out_path}"
    )
    if shortfall:
        click.echo(
            f"note: classes with fewer than {cfg.shots} train samples: "
            f"{', '.join(shortfall)}"
        )


def _pipeline_from(cfg, gallery_path, manifest_path, config_path):
    gallery = load_gallery(gallery_path)
    backends = backends_from_config(cfg)
    cache = DescriptionCache(cfg.cache_path) if cfg.cache_path else None
    captioner = make_captioner(
        cfg.mode, backends.chat_backend, cfg.templates, cfg.s, cache
    )
    resolver = None
    if manifest_path is not None or Path(
        Path(config_path).parent / "manifest.jsonl"
    ).exists():
        manifest = _manifest_for(config_path, manifest_path)
        refs = {r.id: r.content_ref for r in manifest.records}
        resolver = lambda sid: refs.get(sid, sid)  # noqa: E731
    return gallery, backends, captioner, resolver


@cli.command()
@_config_arg
@_manifest_option
@_knob_options
@click.option(
    "--gallery",
    "gallery_path",
    type=click.Path(exists=True, dir_okay=False),
    required=True,
    help="Gallery file from build-gallery.",
)
@click.option("--superclass", default=None, help="Coarse category word for prompts.")
@click.option("--id", "sample_id", default=None, help="Stable id for caption caching.")
@click.option("--top-k", type=int, default=3, show_default=True)
@click.argument("image")
@_friendly
def classify(
    config_path,
    manifest_path,
    gallery_path,
    superclass,
    sample_id,
    top_k,
    image,
    **flags,
) -> None:
    """Classify one image reference against a saved gallery."""
    cfg = _resolve(config_path, **flags)
    gallery, backends, captioner, resolver = _pipeline_from(
        cfg, gallery_path, manifest_path, config_path
    )
    kwargs = {"image_ref_resolver": resolver} if resolver is not None else {}
    pipeline = QueryPipeline(
        gallery=gallery,
        image_encoder=backends.image_encoder,
        text_encoder=backends.text_encoder,
        captioner=captioner,
        retrieval=RetrievalConfig(cfg.beta, cfg.aggregation),
        mode=cfg.mode,
        t=cfg.t,
        seed=cfg.seed,
        representative=cfg.representative,
        **kwargs,
    )
    if superclass is None:
        superclass = gallery.metadata.pipeline.get("superclass_default", "object")
    result, description = pipeline.classify_ref(image, superclass, sample_id)
    _echo_json(
        {
            "predicted": result.predicted,
            "margin": round(result.margin, 9),
            "top": [
                {"label": label, "score": round(score, 9)}
                for label, score in result.top_classes(top_k)
            ],
            "description": None
            if description is None
            else {
                "regions": list(description.regions),
                "attributes": list(description.region_attributes),
                "summary": description.summary,
            },
        }
    )


@cli.command()
@_config_arg
@click.option("--superclass", required=True, help="Coarse category word for prompts.")
@click.option("--id", "sample_id", default=None, help="Stable id for caption caching.")
@click.option(
    "--ref",
    "refs",
    multiple=True,
    help="Reference image for contrast (repeatable).",
)
@click.option("--naive", is_flag=True, help="Single-prompt description, no regions.")
@click.option("--s", "s", type=int, default=None, help="Regions per description.")
@click.option("--cache", "cache_path", type=click.Path(), default=None)
@click.argument("image")
@_friendly
def caption(config_path, superclass, sample_id, refs, naive, image, **flags) -> None:
    """Run the region-by-region describer on one image and print it."""
    cfg = _resolve(config_path, **flags)
    backends = backends_from_config(cfg)
    if backends.chat_backend is None:
        raise click.ClickException("config does not describe a chat backend")
    cache = DescriptionCache(cfg.cache_path) if cfg.cache_path else None
    mode = "description" if naive else "similar-ref"
    captioner = make_captioner(
        mode, backends.chat_backend, cfg.templates, cfg.s, cache
    )
    description = captioner.caption(
        image,
        superclass,
        list(refs),
        sample_id=sample_id or image,
        reference_ids=list(refs),
    )
    _echo_json(
        {
            "sample_id": description.sample_id,
            "superclass": description.superclass,
            "regions": list(description.regions),
            "attributes": list(description.region_attributes),
            "summary": description.summary,
            "backend": description.backend_id,
        }
    )


# --- experiments -------------------------------------------------------------


@cli.command("evaluate")
@_config_arg
@_manifest_option
@_knob_options
@click.option("--limit", type=int, default=None, help="Cap on test queries.")
@click.option(
    "--report",
    "report_dir",
    type=click.Path(file_okay=False),
    default=None,
    help="Directory for report.json, per_class.csv, confusion.png.",
)
@click.option("--figures/--no-figures", default=True, show_default=True)
@_friendly
def evaluate_cmd(config_path, manifest_path, report_dir, figures, **flags) -> None:
    """Run one few-shot episode and score the test split."""
    cfg = _resolve(config_path, **flags)
    manifest = _manifest_for(config_path, manifest_path)
    report = evaluate(cfg, manifest)
    click.echo(
        f"accuracy {report.percent:.2f}% ({report.correct}/{report.total}) "
        f"mode={report.config['mode']} shots={report.config['shots']} "
        f"seed={report.seed} in {report.wall_clock_s:.2f}s"
    )
    if report_dir is not None:
        out = Path(report_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        lines = ["label,correct,total,accuracy"]
        for label in sorted(report.per_class):
            counts = report.per_class[label]
            lines.append(
                f"{label},{counts['correct']},{counts['total']},"
                f"{counts['correct'] / counts['total']:.4f}"
            )
        (out / "per_class.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        written = [out / "report.json", out / "per_class.csv"]
        if figures:
            written.append(plot_confusion(report, out / "confusion.png"))
        for path in written:
            click.echo(f"  wrote {path}")


def _grid_outputs(grid, report_dir: str, stem: str, figures: bool) -> None:
    out = Path(report_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{stem}.csv"
    grid.to_csv(csv_path)
    grid.to_json(out / f"{stem}.json")
    written = [csv_path, out / f"{stem}.json"]
    if figures:
        written.extend(render_grid_figures(grid, out / stem))
    click.echo(csv_path.read_text(encoding="utf-8").rstrip())
    for path in written:
        click.echo(f"  wrote {path}")


@cli.command()
@_config_arg
@_manifest_option
@_knob_options
@click.option(
    "--modes",
    multiple=True,
    type=click.Choice(list(ABLATION_MODES)),
    default=ABLATION_MODES,
    show_default=True,
)
@click.option(
    "--grid-shots",
    "grid_shots",
    multiple=True,
    type=int,
    default=DEFAULT_SHOTS,
    show_default=True,
    help="Shot counts for the grid.",
)
@click.option("--seeds", multiple=True, type=int, default=None, help="Episode seeds.")
@click.option(
    "--report",
    "report_dir",
    type=click.Path(file_okay=False),
    required=True,
    help="Directory for ablation.csv/.json and figures.",
)
@click.option("--figures/--no-figures", default=True, show_default=True)
@_friendly
def ablate(
    config_path, manifest_path, modes, grid_shots, seeds, report_dir, figures, **flags
) -> None:
    """Compare input-composition modes over a shot grid."""
    cfg = _resolve(config_path, **flags)
    manifest = _manifest_for(config_path, manifest_path)
    grid = run_ablation(
        manifest,
        cfg,
        modes=list(modes),
        shots=list(grid_shots),
        seeds=list(seeds) if seeds else None,
    )
    _grid_outputs(grid, report_dir, "ablation", figures)


@cli.command("sweep")
@_config_arg
@_manifest_option
@_knob_options
@click.argument("parameter", type=click.Choice(list(SWEEP_PARAMETERS)))
@click.option(
    "--value",
    "values",
    multiple=True,
    required=True,
    help="Swept value (repeatable).",
)
@click.option(
    "--grid-shots",
    "grid_shots",
    multiple=True,
    type=int,
    default=DEFAULT_SHOTS,
    show_default=True,
)
@click.option("--seeds", multiple=True, type=int, default=None, help="Episode seeds.")
@click.option(
    "--report",
    "report_dir",
    type=click.Path(file_okay=False),
    required=True,
    help="Directory for sweep_<param>.csv/.json and figures.",
)
@click.option("--figures/--no-figures", default=True, show_default=True)
@_friendly
def sweep_cmd(
    config_path,
    manifest_path,
    parameter,
    values,
    grid_shots,
    seeds,
    report_dir,
    figures,
    **flags,
) -> None:
    """Sweep one pipeline parameter (s, t, or beta) over a shot grid."""
    cfg = _resolve(config_path, **flags)
    manifest = _manifest_for(config_path, manifest_path)
    grid = sweep(
        manifest,
        cfg,
        parameter,
        list(values),
        shots=list(grid_shots),
        seeds=list(seeds) if seeds else None,
    )
    _grid_outputs(grid, report_dir, f"sweep_{parameter}", figures)


# --- serving -----------------------------------------------------------------


@cli.command("serve")
@_config_arg
@_manifest_option
@_knob_options
@click.option(
    "--gallery",
    "gallery_path",
    type=click.Path(exists=True, dir_okay=False),
    required=True,
)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8080, show_default=True)
@_friendly
def serve_cmd(config_path, manifest_path, gallery_path, host, port, **flags) -> None:
    """Serve /classify and /insert_category over HTTP."""
    cfg = _resolve(config_path, **flags)
    gallery, backends, captioner, resolver = _pipeline_from(
        cfg, gallery_path, manifest_path, config_path
    )
    service = GalleryService(
        gallery,
        backends.image_encoder,
        backends.text_encoder,
        captioner,
        RetrievalConfig(cfg.beta, cfg.aggregation),
        mode=cfg.mode,
        image_ref_resolver=resolver,
    )
    click.echo(f"serving {gallery_path} on http://{host}:{port}")
    serve(service, host, port)


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
