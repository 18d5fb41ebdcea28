"""Shared fixtures: small synthetic worlds, backends, random galleries."""

from __future__ import annotations

import numpy as np
import pytest

from mmgallery.encoders import EmbeddingVector, normalize
from mmgallery.gallery import (
    FusionConfig,
    Gallery,
    GalleryEntry,
    GalleryMetadata,
)
from mmgallery.harness import PipelineBackends
from mmgallery.synth import SynthWorld, SynthWorldConfig, generate_world


def random_instance(
    rng: np.random.Generator,
    n_classes: int | None = None,
    max_per_class: int | None = None,
    dim: int | None = None,
) -> tuple[EmbeddingVector, Gallery]:
    """One random (query, gallery) pair with unit keys and a unit query."""
    n_classes = n_classes or int(rng.integers(2, 21))
    max_per_class = max_per_class or int(rng.integers(1, 17))
    dim = dim or int(rng.integers(2, 65))
    labels = [f"class{j:02d}" for j in range(n_classes)]
    entries = []
    for label in labels:
        for i in range(int(rng.integers(1, max_per_class + 1))):
            entries.append(
                GalleryEntry(
                    sample_id=f"{label}-s{i:03d}",
                    label=label,
                    description_key="",
                    fused=normalize(rng.standard_normal(dim)),
                )
            )
    metadata = GalleryMetadata(
        class_labels=tuple(labels),
        dim_image=dim,
        dim_text=0,
        image_encoder="test",
        text_encoder="",
        fusion=FusionConfig(),
        k=max_per_class,
    )
    query = normalize(rng.standard_normal(dim))
    return query, Gallery(metadata, entries)


@pytest.fixture(scope="session")
def make_random_instance():
    return random_instance


def make_backends(world: SynthWorld, **chat_kwargs) -> PipelineBackends:
    return PipelineBackends(
        world.image_encoder(),
        world.text_encoder(),
        world.chat_backend(**chat_kwargs),
    )


@pytest.fixture(scope="session")
def clean_world() -> SynthWorld:
    """Noiseless, hallucination-free: classification should be exact."""
    return generate_world(
        SynthWorldConfig(classes=6, k_train=6, n_test=4, seed=11)
    )


@pytest.fixture(scope="session")
def noisy_world() -> SynthWorld:
    """Overlap-heavy attributes, noisy images, hallucinating describer."""
    return generate_world(
        SynthWorldConfig(
            classes=8,
            k_train=8,
            n_test=6,
            seed=5,
            attrs_per_class=5,
            shared_tokens=3,
            image_noise=0.9,
            hallucination_rate=0.15,
            family_spread=0.25,
        )
    )


@pytest.fixture()
def clean_backends(clean_world) -> PipelineBackends:
    return make_backends(clean_world)
