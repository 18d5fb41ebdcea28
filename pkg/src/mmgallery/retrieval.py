"""Classification by affinity between a query key and the gallery keys.

The affinity of a query q to a stored key k is ``exp(-beta * (1 - q . k))``,
a strictly increasing function of their cosine: 1 when the vectors align,
``exp(-beta)`` when they are orthogonal, and ``exp(-2 beta)`` at the
antipode. Per-class scores either sum the class's entry affinities
(``class-sum``, the default) or take the class maximum (``nearest``); the
prediction is the top-scoring class, ties resolved toward the smaller
label. Under ``nearest`` the argmax is invariant to beta because ``exp`` is
monotone.

Class scores are accumulated over entries in sorted-sample-id order so a
permutation of gallery rows can never change a prediction through float
reassociation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encoders import EmbeddingVector
from .errors import DimensionMismatch, EmptyGallery
from .gallery import Gallery

AGGREGATIONS = ("class-sum", "nearest")
DEFAULT_BETA = 5.5


@dataclass(frozen=True)
class RetrievalConfig:
    beta: float = DEFAULT_BETA
    aggregation: str = "class-sum"

    def __post_init__(self) -> None:
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValueError("beta must be a positive finite number")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(
                f"aggregation must be one of {AGGREGATIONS}, "
                f"got {self.aggregation!r}"
            )


@dataclass(frozen=True)
class EntryScore:
    sample_id: str
    label: str
    cosine: float
    affinity: float


@dataclass(frozen=True)
class AffinityResult:
    predicted: str
    margin: float
    per_class: dict[str, float]
    per_entry: tuple[EntryScore, ...]

    def top_classes(self, k: int | None = None) -> list[tuple[str, float]]:
        ranked = sorted(self.per_class.items(), key=lambda kv: (-kv[1], kv[0]))
        return ranked if k is None else ranked[:k]


def _query_values(query: EmbeddingVector | Sequence[float]) -> np.ndarray:
    if isinstance(query, EmbeddingVector):
        return query.values
    return np.asarray(query, dtype=np.float64).reshape(-1)


def affinity(
    query: EmbeddingVector | Sequence[float], gallery: Gallery, beta: float
) -> np.ndarray:
    """Per-entry affinities in gallery order, computed in double precision."""
    if not (beta > 0 and math.isfinite(beta)):
        raise ValueError("beta must be a positive finite number")
    if len(gallery) == 0:
        raise EmptyGallery("gallery has no entries")
    values = _query_values(query)
    keys = gallery.key_matrix()
    if values.shape[0] != keys.shape[1]:
        raise DimensionMismatch(
            f"query dim {values.shape[0]} vs gallery dim {keys.shape[1]}"
        )
    cosines = keys @ values
    return np.exp(-beta * (1.0 - cosines))


def _decide(per_class: dict[str, float]) -> tuple[str, float]:
    ranked = sorted(per_class.items(), key=lambda kv: (-kv[1], kv[0]))
    predicted = ranked[0][0]
    margin = 0.0 if len(ranked) < 2 else ranked[0][1] - ranked[1][1]
    return predicted, margin


def classify(
    query: EmbeddingVector | Sequence[float],
    gallery: Gallery,
    cfg: RetrievalConfig | None = None,
) -> AffinityResult:
    """Score every class against the query and pick the best one."""
    cfg = cfg or RetrievalConfig()
    values = _query_values(query)
    keys = gallery.key_matrix()
    if len(gallery) and values.shape[0] != keys.shape[1]:
        raise DimensionMismatch(
            f"query dim {values.shape[0]} vs gallery dim {keys.shape[1]}"
        )
    affinities = affinity(values, gallery, cfg.beta)
    cosines = keys @ values
    per_entry = tuple(
        EntryScore(e.sample_id, e.label, float(c), float(a))
        for e, c, a in zip(gallery.entries, cosines, affinities)
    )
    # canonical accumulation order: sorted by sample id
    order = sorted(range(len(per_entry)), key=lambda i: per_entry[i].sample_id)
    per_class: dict[str, float] = {}
    if cfg.aggregation == "class-sum":
        for i in order:
            score = per_entry[i]
            per_class[score.label] = per_class.get(score.label, 0.0) + score.affinity
    else:
        for i in order:
            score = per_entry[i]
            best = per_class.get(score.label)
            if best is None or score.affinity > best:
                per_class[score.label] = score.affinity
    predicted, margin = _decide(per_class)
    return AffinityResult(predicted, margin, per_class, per_entry)


def brute_force_oracle(
    query: EmbeddingVector | Sequence[float],
    gallery: Gallery,
    cfg: RetrievalConfig | None = None,
) -> AffinityResult:
    """Scalar re-derivation of :func:`classify` for equivalence checks.

    Pure Python arithmetic, no vectorization; deliberately kept as an
    independent second route to the same answer.
    """
    cfg = cfg or RetrievalConfig()
    if len(gallery) == 0:
        raise EmptyGallery("gallery has no entries")
    values = [float(x) for x in _query_values(query)]
    scores = []
    for entry in gallery.entries:
        key = entry.fused.tolist()
        if len(key) != len(values):
            raise DimensionMismatch(
                f"query dim {len(values)} vs gallery dim {len(key)}"
            )
        cos = 0.0
        for a, b in zip(values, key):
            cos += a * b
        scores.append(
            EntryScore(
                entry.sample_id,
                entry.label,
                cos,
                math.exp(-cfg.beta * (1.0 - cos)),
            )
        )
    per_class: dict[str, float] = {}
    for score in sorted(scores, key=lambda s: s.sample_id):
        if cfg.aggregation == "class-sum":
            per_class[score.label] = per_class.get(score.label, 0.0) + score.affinity
        else:
            best = per_class.get(score.label)
            if best is None or score.affinity > best:
                per_class[score.label] = score.affinity
    predicted, margin = _decide(per_class)
    return AffinityResult(predicted, margin, per_class, tuple(scores))
