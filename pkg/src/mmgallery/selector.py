"""Reference sample selection for contrastive captioning.

Class centers are the normalized means of each class's support embeddings.
Reference selection ranks foreign classes by cosine between the target and
each center, keeps the top ``t``, and takes one representative member per
kept class. All ties break deterministically: equal center similarities by
ascending class label, equal member similarities by ascending sample id.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .encoders import EmbeddingVector, cosine, normalize
from .errors import NoEligibleClasses

REPRESENTATIVE_MODES = ("target", "center")


@dataclass(frozen=True)
class ClassCenter:
    class_label: str
    center: EmbeddingVector
    member_ids: tuple[str, ...]


@dataclass(frozen=True)
class Reference:
    sample_id: str
    class_label: str
    center_similarity: float


@dataclass(frozen=True)
class ReferenceSet:
    target_id: str
    references: tuple[Reference, ...]
    t: int

    @property
    def sample_ids(self) -> tuple[str, ...]:
        return tuple(ref.sample_id for ref in self.references)

    @property
    def class_labels(self) -> tuple[str, ...]:
        return tuple(ref.class_label for ref in self.references)


def compute_class_centers(
    embeddings: Mapping[str, EmbeddingVector],
    labels: Mapping[str, str],
) -> list[ClassCenter]:
    """Normalized per-class mean embeddings, sorted by class label."""
    groups: dict[str, list[str]] = {}
    for sample_id in embeddings:
        if sample_id not in labels:
            raise ValueError(f"sample {sample_id!r} has no label")
        groups.setdefault(labels[sample_id], []).append(sample_id)
    centers = []
    for label in sorted(groups):
        member_ids = tuple(sorted(groups[label]))
        stacked = np.stack([embeddings[mid].values for mid in member_ids])
        # mean + renormalize; ZeroVector propagates for antipodal degenerate sets
        centers.append(
            ClassCenter(label, normalize(stacked.mean(axis=0)), member_ids)
        )
    return centers


def _representative(
    anchor: EmbeddingVector,
    center: ClassCenter,
    embeddings: Mapping[str, EmbeddingVector],
) -> str:
    best_id = None
    best_sim = -np.inf
    for member_id in sorted(center.member_ids):
        sim = cosine(anchor, embeddings[member_id])
        if sim > best_sim:
            best_id, best_sim = member_id, sim
    assert best_id is not None
    return best_id


def select_references(
    target: EmbeddingVector,
    centers: Sequence[ClassCenter],
    embeddings: Mapping[str, EmbeddingVector],
    t: int,
    exclude_label: str | None = None,
    *,
    representative: str = "target",
    target_id: str = "",
) -> ReferenceSet:
    """Pick the ``t`` most target-similar foreign classes, one member each.

    ``representative`` chooses the per-class member: closest to the target
    (default) or closest to the class's own center.

    Raises:
        NoEligibleClasses: if exclusion removes every class.
    """
    if t < 1:
        raise ValueError("t must be at least 1")
    if representative not in REPRESENTATIVE_MODES:
        raise ValueError(f"unknown representative mode {representative!r}")
    eligible = [c for c in centers if c.class_label != exclude_label]
    if not eligible:
        raise NoEligibleClasses(
            f"no classes remain after excluding {exclude_label!r}"
        )
    ranked = sorted(
        eligible,
        key=lambda c: (-cosine(target, c.center), c.class_label),
    )[:t]
    references = []
    for center in ranked:
        anchor = target if representative == "target" else center.center
        member_id = _representative(anchor, center, embeddings)
        references.append(
            Reference(member_id, center.class_label, cosine(target, center.center))
        )
    return ReferenceSet(target_id, tuple(references), t)


def select_random_references(
    target: EmbeddingVector,
    centers: Sequence[ClassCenter],
    embeddings: Mapping[str, EmbeddingVector],
    t: int,
    seed: int,
    exclude_label: str | None = None,
    *,
    target_id: str = "",
) -> ReferenceSet:
    """Uniformly random distinct classes and members, ignoring similarity.

    The draw is keyed by (seed, target id) so repeated calls are stable.
    The result is still presented sorted by center similarity.
    """
    if t < 1:
        raise ValueError("t must be at least 1")
    eligible = sorted(
        (c for c in centers if c.class_label != exclude_label),
        key=lambda c: c.class_label,
    )
    if not eligible:
        raise NoEligibleClasses(
            f"no classes remain after excluding {exclude_label!r}"
        )
    rng = random.Random(f"random-refs:{seed}:{target_id}")
    chosen = rng.sample(eligible, min(t, len(eligible)))
    references = []
    for center in chosen:
        member_id = rng.choice(sorted(center.member_ids))
        references.append(
            Reference(member_id, center.class_label, cosine(target, center.center))
        )
    references.sort(key=lambda r: (-r.center_similarity, r.class_label))
    return ReferenceSet(target_id, tuple(references), t)


def choose_references(
    policy: str,
    target: EmbeddingVector,
    centers: Sequence[ClassCenter],
    embeddings: Mapping[str, EmbeddingVector],
    t: int,
    *,
    exclude_label: str | None = None,
    seed: int = 0,
    representative: str = "target",
    target_id: str = "",
) -> ReferenceSet:
    """Dispatch on reference policy: ``similar``, ``random``, or ``none``.

    ``t == 0`` or policy ``none`` yields an empty reference set.
    """
    if policy not in ("similar", "random", "none"):
        raise ValueError(f"unknown reference policy {policy!r}")
    if policy == "none" or t == 0:
        return ReferenceSet(target_id, (), t)
    if policy == "similar":
        return select_references(
            target,
            centers,
            embeddings,
            t,
            exclude_label,
            representative=representative,
            target_id=target_id,
        )
    return select_random_references(
        target, centers, embeddings, t, seed, exclude_label, target_id=target_id
    )
