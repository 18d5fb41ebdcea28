"""Query-side pipeline: caption, embed, fuse, and classify one image.

At inference time the true label is unknown, so reference selection runs
without exclusion over the class centers recovered from the gallery's
stored keys. The captioning mode must match what the gallery was built
with; the relevant settings are echoed in the gallery metadata.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

from .captioner import (
    Captioner,
    ChatBackend,
    NaiveCaptioner,
    PromptTemplates,
    StructuredDescription,
)
from .encoders import Encoder, EmbeddingVector, embed_image, embed_text
from .gallery import Gallery, fuse
from .retrieval import AffinityResult, RetrievalConfig, classify
from .selector import ClassCenter, choose_references

logger = logging.getLogger(__name__)

ABLATION_MODES = ("image", "description", "structured", "random-ref", "similar-ref")

# how each ablation row captions and selects references
_MODE_TO_POLICY = {
    "image": "none",
    "description": "none",
    "structured": "none",
    "random-ref": "random",
    "similar-ref": "similar",
}


def reference_policy_for_mode(mode: str) -> str:
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}")
    return _MODE_TO_POLICY[mode]


def make_captioner(
    mode: str,
    backend: ChatBackend | None,
    templates: PromptTemplates,
    s: int,
    cache=None,
):
    """The captioner a mode calls for, or None when captioning is off."""
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}")
    if mode == "image":
        return None
    if backend is None:
        raise ValueError(f"mode {mode!r} needs a chat backend")
    if mode == "description":
        return NaiveCaptioner(backend, templates, cache)
    return Captioner(backend, templates, s, cache)


@dataclass
class QueryPipeline:
    """Classifies content references against one gallery snapshot."""

    gallery: Gallery
    image_encoder: Encoder
    text_encoder: Encoder | None = None
    captioner: Captioner | NaiveCaptioner | None = None
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    mode: str = "similar-ref"
    t: int = 4
    seed: int = 0
    representative: str = "target"
    # maps a gallery sample id to the content ref its image lives behind
    image_ref_resolver: Callable[[str], str] = staticmethod(lambda sample_id: sample_id)
    _centers: list[ClassCenter] | None = field(default=None, repr=False)
    _members: dict[str, EmbeddingVector] | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.mode not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode {self.mode!r}")
        if self.mode != "image" and self.captioner is None:
            raise ValueError(f"mode {self.mode!r} needs a captioner")
        if self.captioner is not None and self.text_encoder is None:
            raise ValueError("captioning modes need a text encoder")

    def _reference_space(self) -> tuple[list[ClassCenter], dict[str, EmbeddingVector]]:
        if self._centers is None:
            self._members = self.gallery.image_block_embeddings()
            labels = {e.sample_id: e.label for e in self.gallery.entries}
            from .selector import compute_class_centers

            self._centers = compute_class_centers(self._members, labels)
        assert self._members is not None
        return self._centers, self._members

    def describe(
        self,
        content_ref: str,
        superclass: str,
        sample_id: str | None = None,
        image_vec: EmbeddingVector | None = None,
    ) -> StructuredDescription | None:
        """Caption one query image the same way the gallery entries were."""
        if self.captioner is None:
            return None
        sample_id = sample_id or content_ref
        policy = reference_policy_for_mode(self.mode)
        if policy == "none" or self.t == 0 or self.captioner.kind == "naive":
            refs_ids: tuple[str, ...] = ()
        else:
            centers, members = self._reference_space()
            if image_vec is None:
                image_vec = embed_image(content_ref, self.image_encoder)
            refs = choose_references(
                policy,
                image_vec,
                centers,
                members,
                self.t,
                exclude_label=None,  # the true class is unknown at inference
                seed=self.seed,
                representative=self.representative,
                target_id=sample_id,
            )
            refs_ids = refs.sample_ids
        return self.captioner.caption(
            content_ref,
            superclass,
            [self.image_ref_resolver(sid) for sid in refs_ids],
            sample_id=sample_id,
            reference_ids=refs_ids,
        )

    def query_vector(
        self, content_ref: str, superclass: str, sample_id: str | None = None
    ) -> tuple[EmbeddingVector, StructuredDescription | None]:
        image_vec = embed_image(content_ref, self.image_encoder)
        description = self.describe(content_ref, superclass, sample_id, image_vec)
        if description is None:
            return image_vec, None
        assert self.text_encoder is not None
        text_vec = embed_text(description.summary, self.text_encoder)
        return fuse(image_vec, text_vec, self.gallery.metadata.fusion), description

    def classify_ref(
        self, content_ref: str, superclass: str, sample_id: str | None = None
    ) -> tuple[AffinityResult, StructuredDescription | None]:
        query, description = self.query_vector(content_ref, superclass, sample_id)
        return classify(query, self.gallery, self.retrieval), description
