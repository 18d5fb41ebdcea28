"""Few-shot evaluation harness: episodes, ablation grids, and sweeps.

An episode draws K support samples per class from the train split with a
seeded generator keyed by (seed, class label), so every ablation row sees
the identical support sets. Reports carry exact counts next to the derived
accuracy, the full config echo, and cache statistics; grids additionally
render a delimited table whose rows mirror the published reference tables,
whose values ride along as display-only metadata columns.
"""

from __future__ import annotations

import csv
import json
import logging
import random
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

from .captioner import (
    ChatBackendDescriptor,
    DescriptionCache,
    PromptTemplates,
    make_chat_backend,
)
from .encoders import Encoder, EncoderDescriptor, make_encoder
from .errors import (
    EmptyManifest,
    EmptyTestSplit,
    InvalidParameterValue,
    MMGalleryError,
)
from .gallery import FusionConfig, GalleryBuildConfig, build_gallery
from .manifest import DatasetManifest, ManifestRecord
from .pipeline import (
    ABLATION_MODES,
    QueryPipeline,
    make_captioner,
    reference_policy_for_mode,
)
from .retrieval import RetrievalConfig

logger = logging.getLogger(__name__)

DEFAULT_SHOTS = (1, 2, 4, 8, 16)
SWEEP_PARAMETERS = ("s", "t", "beta")

# Published reference accuracies (percent) for side-by-side display in
# reports. Display-only: nothing in this package asserts against them.
REFERENCE_TABLES: dict[str, dict[Any, dict[Any, float]]] = {
    "mode": {
        "image": {"avg": 50.74, 1: 37.88, 2: 45.76, 4: 52.18, 8: 57.14, 16: 60.72},
        "description": {"avg": 66.94, 1: 58.38, 2: 66.52, 4: 67.28, 8: 70.94, 16: 71.56},
        "structured": {"avg": 72.09, 1: 65.42, 2: 70.96, 4: 73.66, 8: 74.20, 16: 76.20},
        "random-ref": {"avg": 75.65, 1: 69.16, 2: 73.12, 4: 76.64, 8: 79.08, 16: 80.24},
        "similar-ref": {"avg": 76.78, 1: 70.18, 2: 74.42, 4: 78.00, 8: 80.24, 16: 81.08},
    },
    "s": {
        1: {"avg": 70.10, 1: 66.24, 2: 67.22, 4: 71.15, 8: 72.28, 16: 73.62},
        2: {"avg": 73.81, 1: 67.25, 2: 71.08, 4: 74.97, 8: 77.44, 16: 78.33},
        3: {"avg": 76.78, 1: 70.18, 2: 74.42, 4: 78.00, 8: 80.24, 16: 81.08},
        4: {"avg": 76.74, 1: 70.24, 2: 74.44, 4: 77.56, 8: 80.83, 16: 80.62},
        5: {"avg": 77.32, 1: 70.21, 2: 75.32, 4: 77.98, 8: 81.00, 16: 82.18},
    },
    "t": {
        0: {"avg": 72.09, 1: 65.42, 2: 70.96, 4: 73.66, 8: 74.20, 16: 76.20},
        1: {"avg": 76.36, 1: 69.03, 2: 74.30, 4: 77.76, 8: 79.38, 16: 81.33},
        2: {"avg": 76.25, 1: 69.25, 2: 74.42, 4: 77.04, 8: 80.23, 16: 80.32},
        3: {"avg": 76.61, 1: 70.63, 2: 74.68, 4: 77.34, 8: 80.21, 16: 80.20},
        4: {"avg": 76.78, 1: 70.18, 2: 74.42, 4: 78.00, 8: 80.24, 16: 81.08},
    },
}


@dataclass
class ExperimentConfig:
    """Everything one evaluation cell needs, descriptors included."""

    shots: int = 4
    t: int = 4
    s: int = 3
    beta: float = 5.5
    aggregation: str = "class-sum"
    mode: str = "similar-ref"
    seed: int = 0
    fusion: FusionConfig = field(default_factory=FusionConfig)
    image_encoder: EncoderDescriptor | None = None
    text_encoder: EncoderDescriptor | None = None
    chat_backend: ChatBackendDescriptor | None = None
    templates: PromptTemplates = field(default_factory=PromptTemplates)
    cache_path: str | None = None
    category_text: bool = False
    representative: str = "target"
    max_in_flight: int = 1
    limit: int | None = None

    def __post_init__(self) -> None:
        if self.shots < 1:
            raise InvalidParameterValue("shots must be >= 1")
        if self.t < 0:
            raise InvalidParameterValue("t must be >= 0")
        if self.s < 1:
            raise InvalidParameterValue("s must be >= 1")
        if self.beta <= 0:
            raise InvalidParameterValue("beta must be > 0")
        if self.mode not in ABLATION_MODES:
            raise InvalidParameterValue(
                f"mode must be one of {ABLATION_MODES}, got {self.mode!r}"
            )
        if self.limit is not None and self.limit < 1:
            raise InvalidParameterValue("limit must be >= 1 when set")

    def echo(self) -> dict[str, Any]:
        return {
            "shots": self.shots,
            "t": self.t,
            "s": self.s,
            "beta": self.beta,
            "aggregation": self.aggregation,
            "mode": self.mode,
            "seed": self.seed,
            "fusion": self.fusion.to_dict(),
            "category_text": self.category_text,
            "representative": self.representative,
            "limit": self.limit,
        }


@dataclass
class PipelineBackends:
    """Constructed backend objects, injectable for tests."""

    image_encoder: Encoder
    text_encoder: Encoder | None = None
    chat_backend: Any = None


def backends_from_config(cfg: ExperimentConfig) -> PipelineBackends:
    if cfg.image_encoder is None:
        raise MMGalleryError("config does not describe an image encoder")
    image_encoder = make_encoder(cfg.image_encoder)
    text_encoder = (
        make_encoder(cfg.text_encoder) if cfg.text_encoder is not None else None
    )
    chat = (
        make_chat_backend(cfg.chat_backend)
        if cfg.chat_backend is not None
        else None
    )
    return PipelineBackends(image_encoder, text_encoder, chat)


def sample_k_shot(
    records: Sequence[ManifestRecord], k: int, seed: int
) -> tuple[list[ManifestRecord], list[str]]:
    """Draw K support samples per class, without replacement, seeded.

    The draw for a class depends only on (seed, label), never on the other
    classes. Classes with fewer than K samples contribute everything they
    have and are reported in the shortfall list.
    """
    if k < 1:
        raise InvalidParameterValue("k must be >= 1")
    if not records:
        raise EmptyManifest("no records to sample from")
    by_label: dict[str, list[ManifestRecord]] = {}
    for record in records:
        by_label.setdefault(record.label, []).append(record)
    support: list[ManifestRecord] = []
    shortfall: list[str] = []
    for label in sorted(by_label):
        members = sorted(by_label[label], key=lambda r: r.id)
        if len(members) <= k:
            chosen = members
            if len(members) < k:
                shortfall.append(label)
        else:
            rng = random.Random(f"kshot:{seed}:{label}")
            chosen = rng.sample(members, k)
            chosen.sort(key=lambda r: r.id)
        support.extend(chosen)
    return support, shortfall


@dataclass
class EvalReport:
    """Outcome of one (config, manifest) evaluation."""

    correct: int
    total: int
    per_class: dict[str, dict[str, int]]
    confusion: dict[str, dict[str, int]]
    margins: list[float]
    wall_clock_s: float
    config: dict[str, Any]
    seed: int
    shortfall_classes: list[str]
    limited: bool
    cache_stats: dict[str, int]

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    @property
    def percent(self) -> float:
        return 100.0 * self.accuracy

    def per_class_accuracy(self) -> dict[str, float]:
        return {
            label: counts["correct"] / counts["total"] if counts["total"] else 0.0
            for label, counts in self.per_class.items()
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "percent": round(self.percent, 4),
            "correct": self.correct,
            "total": self.total,
            "per_class": self.per_class,
            "per_class_accuracy": {
                k: round(v, 6) for k, v in self.per_class_accuracy().items()
            },
            "confusion": self.confusion,
            "margins": [round(m, 9) for m in self.margins],
            "mean_margin": (
                round(sum(self.margins) / len(self.margins), 9)
                if self.margins
                else 0.0
            ),
            "wall_clock_s": round(self.wall_clock_s, 4),
            "config": self.config,
            "seed": self.seed,
            "shortfall_classes": self.shortfall_classes,
            "limited": self.limited,
            "cache_stats": self.cache_stats,
        }


def build_support_gallery(
    cfg: ExperimentConfig,
    manifest: DatasetManifest,
    backends: PipelineBackends | None = None,
    cache: DescriptionCache | None = None,
):
    """Sample the episode and build its gallery.

    Returns ``(gallery, captioner, backends, shortfall)`` so callers can
    reuse the constructed pieces for querying.
    """
    train = manifest.split("train")
    if not train:
        raise EmptyManifest(f"manifest {manifest.name!r} has no train records")
    support, shortfall = sample_k_shot(train, cfg.shots, cfg.seed)

    if backends is None:
        backends = backends_from_config(cfg)
    if cache is None and cfg.cache_path:
        cache = DescriptionCache(cfg.cache_path)
    captioner = make_captioner(
        cfg.mode, backends.chat_backend, cfg.templates, cfg.s, cache
    )
    fusion = cfg.fusion
    if cfg.mode == "image":
        fusion = replace(fusion, text_weight=0.0)
    build_cfg = GalleryBuildConfig(
        fusion=fusion,
        t=cfg.t,
        reference_policy=reference_policy_for_mode(cfg.mode),
        representative=cfg.representative,
        category_text=cfg.category_text,
        seed=cfg.seed,
        max_in_flight=cfg.max_in_flight,
        k=cfg.shots,
    )
    gallery = build_gallery(
        support, backends.image_encoder, backends.text_encoder, captioner, build_cfg
    )
    return gallery, captioner, backends, shortfall


def evaluate(
    cfg: ExperimentConfig,
    manifest: DatasetManifest,
    backends: PipelineBackends | None = None,
    cache: DescriptionCache | None = None,
) -> EvalReport:
    """Run one episode end to end and score the test split."""
    started = time.perf_counter()
    test = manifest.split("test")
    if not test:
        raise EmptyTestSplit(f"manifest {manifest.name!r} has no test records")
    if cache is None and cfg.cache_path:
        cache = DescriptionCache(cfg.cache_path)
    gallery, captioner, backends, shortfall = build_support_gallery(
        cfg, manifest, backends, cache
    )

    train = manifest.split("train")
    image_ref_of = {r.id: r.content_ref for r in train}
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
        image_ref_resolver=lambda sid: image_ref_of.get(sid, sid),
    )

    queries = test if cfg.limit is None else test[: cfg.limit]
    correct = 0
    per_class: dict[str, dict[str, int]] = {}
    confusion: dict[str, dict[str, int]] = {}
    margins: list[float] = []
    for record in queries:
        result, _ = pipeline.classify_ref(
            record.content_ref, record.superclass, record.id
        )
        bucket = per_class.setdefault(record.label, {"correct": 0, "total": 0})
        bucket["total"] += 1
        if result.predicted == record.label:
            bucket["correct"] += 1
            correct += 1
        row = confusion.setdefault(record.label, {})
        row[result.predicted] = row.get(result.predicted, 0) + 1
        margins.append(result.margin)

    return EvalReport(
        correct=correct,
        total=len(queries),
        per_class=per_class,
        confusion=confusion,
        margins=margins,
        wall_clock_s=time.perf_counter() - started,
        config=cfg.echo(),
        seed=cfg.seed,
        shortfall_classes=shortfall,
        limited=cfg.limit is not None and len(test) > len(queries),
        cache_stats=dict(cache.stats) if cache is not None else {},
    )


# --- grids ------------------------------------------------------------------


@dataclass(frozen=True)
class GridCell:
    row: Any  # mode name or swept parameter value
    shots: int
    seed: int
    report: EvalReport


@dataclass
class GridResult:
    """A (row x shots x seeds) grid of evaluations plus its table layout."""

    param: str  # "mode" for ablations, else the swept parameter name
    rows: list[Any]
    shots: tuple[int, ...]
    seeds: tuple[int, ...]
    cells: list[GridCell]

    def accuracy(self, row: Any, shots: int) -> float:
        """Mean percent accuracy over seeds for one grid cell."""
        values = [
            c.report.percent
            for c in self.cells
            if c.row == row and c.shots == shots
        ]
        if not values:
            raise KeyError(f"no cell for row={row!r}, shots={shots}")
        return sum(values) / len(values)

    def row_average(self, row: Any) -> float:
        return sum(self.accuracy(row, k) for k in self.shots) / len(self.shots)

    def table(self) -> list[dict[str, Any]]:
        """One dict per row: the swept value, per-shot accuracies, average."""
        reference = REFERENCE_TABLES.get(self.param, {})
        out = []
        for row in self.rows:
            cells: dict[str, Any] = {self.param: row}
            cells["avg"] = round(self.row_average(row), 2)
            for k in self.shots:
                cells[str(k)] = round(self.accuracy(row, k), 2)
            ref = reference.get(row)
            if ref is not None:
                cells["ref_avg"] = ref.get("avg")
                for k in self.shots:
                    cells[f"ref_{k}"] = ref.get(k)
            out.append(cells)
        return out

    def to_json(self, path: str | Path) -> None:
        payload = {
            "param": self.param,
            "rows": list(self.rows),
            "shots": list(self.shots),
            "seeds": list(self.seeds),
            "table": self.table(),
            "cells": [
                {
                    "row": cell.row,
                    "shots": cell.shots,
                    "seed": cell.seed,
                    "report": cell.report.to_dict(),
                }
                for cell in self.cells
            ],
        }
        Path(path).write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    def to_csv(self, path: str | Path) -> None:
        """Rows = swept values, columns = (value, avg, per-shot accuracies),
        then the display-only reference columns when published values exist."""
        rows = self.table()
        fields = [self.param, "avg", *(str(k) for k in self.shots)]
        if any("ref_avg" in row for row in rows):
            fields += ["ref_avg", *(f"ref_{k}" for k in self.shots)]
        with open(path, "w", encoding="utf-8", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=fields, extrasaction="ignore")
            writer.writeheader()
            writer.writerows(rows)


def _grid(
    manifest: DatasetManifest,
    param: str,
    rows: Sequence[Any],
    make_cfg,
    shots: Sequence[int],
    seeds: Sequence[int],
    backends: PipelineBackends | None,
    cache: DescriptionCache | None,
) -> GridResult:
    cells = []
    for row in rows:
        for k in shots:
            for seed in seeds:
                cfg = make_cfg(row, k, seed)
                report = evaluate(cfg, manifest, backends=backends, cache=cache)
                cells.append(GridCell(row, k, seed, report))
                logger.info(
                    "%s=%s shots=%d seed=%d: %.2f%%",
                    param,
                    row,
                    k,
                    seed,
                    report.percent,
                )
    return GridResult(param, list(rows), tuple(shots), tuple(seeds), cells)


def run_ablation(
    manifest: DatasetManifest,
    base: ExperimentConfig,
    modes: Sequence[str] = ABLATION_MODES,
    shots: Sequence[int] = DEFAULT_SHOTS,
    seeds: Sequence[int] | None = None,
    backends: PipelineBackends | None = None,
    cache: DescriptionCache | None = None,
) -> GridResult:
    """Evaluate each input-composition mode over the shot grid.

    The episode sampler keys on (seed, label) alone, so every mode sees the
    same support sets for a given (shots, seed) cell.
    """
    for mode in modes:
        if mode not in ABLATION_MODES:
            raise InvalidParameterValue(
                f"mode must be one of {ABLATION_MODES}, got {mode!r}"
            )
    seeds = tuple(seeds) if seeds is not None else (base.seed,)
    return _grid(
        manifest,
        "mode",
        list(modes),
        lambda mode, k, seed: replace(base, mode=mode, shots=k, seed=seed),
        shots,
        seeds,
        backends,
        cache,
    )


def sweep(
    manifest: DatasetManifest,
    base: ExperimentConfig,
    parameter: str,
    values: Sequence[Any],
    shots: Sequence[int] = DEFAULT_SHOTS,
    seeds: Sequence[int] | None = None,
    backends: PipelineBackends | None = None,
    cache: DescriptionCache | None = None,
) -> GridResult:
    """Sweep one of ``s``, ``t``, ``beta`` over the shot grid.

    ``t=0`` runs the reference-free pipeline and coincides with the
    ``structured`` ablation row.
    """
    if parameter not in SWEEP_PARAMETERS:
        raise InvalidParameterValue(
            f"parameter must be one of {SWEEP_PARAMETERS}, got {parameter!r}"
        )
    if not values:
        raise InvalidParameterValue("sweep needs at least one value")
    cast: list[Any] = []
    for value in values:
        try:
            as_float = float(value)
        except (TypeError, ValueError) as exc:
            raise InvalidParameterValue(
                f"{parameter} value {value!r} is not numeric"
            ) from exc
        if parameter == "beta":
            if as_float <= 0:
                raise InvalidParameterValue("beta values must be > 0")
            cast.append(as_float)
            continue
        if as_float != int(as_float):
            raise InvalidParameterValue(f"{parameter} values must be integers")
        value = int(as_float)
        if parameter == "s" and value < 1:
            raise InvalidParameterValue("s values must be >= 1")
        if parameter == "t" and value < 0:
            raise InvalidParameterValue("t values must be >= 0")
        cast.append(value)
    seeds = tuple(seeds) if seeds is not None else (base.seed,)
    return _grid(
        manifest,
        parameter,
        cast,
        lambda value, k, seed: replace(
            base, shots=k, seed=seed, **{parameter: value}
        ),
        shots,
        seeds,
        backends,
        cache,
    )
