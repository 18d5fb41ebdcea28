"""Synthetic worlds with known latent structure for end-to-end testing.

A world has C classes grouped into families. Classes in one family share
``shared_tokens`` attribute tokens and have visually similar prototypes, so
the confusable classes are exactly the ones whose attribute sets overlap;
the remaining ``attrs_per_class - shared_tokens`` tokens are unique to the
class. Sample image embeddings are the class prototype plus Gaussian noise,
renormalized.

The mock chat backend answers the production captioning prompts from the
latent tables: region discovery returns class attribute tokens, preferring
tokens the reference classes do not share (references from the target's own
class contribute no contrast); attribute description echoes the latent
token, replaced by a random non-latent vocabulary token with probability
``hallucination_rate`` or by a generic filler with probability
``genericity_rate``; summarization concatenates the surviving tokens.
Corruption draws are keyed by (seed, sample, token), never by call order,
so raising the hallucination rate strictly grows the corrupted set.

Worlds can be written to disk (manifest, precomputed embeddings, vocabulary,
latent tables, ready-made config) so the unchanged production pipeline and
CLI run on them.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .encoders import (
    BagOfTokensEncoder,
    PrecomputedEncoder,
    encode_vector_b64,
    normalize,
)
from .errors import InvalidConfig, MMGalleryError, UnknownSample
from .manifest import DatasetManifest, ManifestRecord, save_manifest

PROMPT_KINDS = ("discover", "describe", "summarize", "naive", "aggregate")


@dataclass(frozen=True)
class SynthWorldConfig:
    classes: int = 10
    k_train: int = 16
    n_test: int = 20
    vocab_size: int = 64
    attrs_per_class: int = 4
    family_size: int = 2
    shared_tokens: int = 2
    generic_tokens: int = 8
    image_dim: int = 16
    family_spread: float = 0.25
    image_noise: float = 0.0
    hallucination_rate: float = 0.0
    genericity_rate: float = 0.0
    naive_content_tokens: int = 1
    naive_generic_tokens: int = 2
    superclass: str = "specimen"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.classes < 1 or self.k_train < 1 or self.n_test < 0:
            raise InvalidConfig("classes and k_train must be >= 1, n_test >= 0")
        if self.family_size < 1:
            raise InvalidConfig("family_size must be >= 1")
        if not 0 <= self.shared_tokens < self.attrs_per_class:
            raise InvalidConfig(
                "shared_tokens must be >= 0 and < attrs_per_class"
            )
        if self.family_size == 1 and self.shared_tokens:
            raise InvalidConfig("singleton families cannot share tokens")
        if self.image_dim < 2:
            raise InvalidConfig("image_dim must be >= 2")
        if self.family_size > 1 and self.family_spread <= 0:
            raise InvalidConfig(
                "family_spread must be > 0 or prototypes within a family "
                "would coincide"
            )
        for name in ("image_noise", "family_spread"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be >= 0")
        for name in ("hallucination_rate", "genericity_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise InvalidConfig(f"{name} must be within [0, 1]")
        if self.generic_tokens < 1:
            raise InvalidConfig("generic_tokens must be >= 1")
        if self.naive_content_tokens < 1:
            raise InvalidConfig("naive_content_tokens must be >= 1")
        if self.token_demand > self.vocab_size:
            raise InvalidConfig(
                f"vocabulary of {self.vocab_size} cannot host "
                f"{self.token_demand} distinct class tokens"
            )

    @property
    def families(self) -> int:
        return math.ceil(self.classes / self.family_size)

    @property
    def unique_tokens(self) -> int:
        return self.attrs_per_class - self.shared_tokens

    @property
    def token_demand(self) -> int:
        return self.families * self.shared_tokens + self.classes * self.unique_tokens


def _unit_draw(*parts: Any) -> float:
    """Deterministic uniform in [0, 1) keyed by the given parts."""
    digest = hashlib.sha256(
        "\x1f".join(str(p) for p in parts).encode("utf-8")
    ).digest()
    return int.from_bytes(digest[:8], "big") / 2.0**64


def _index_draw(n: int, *parts: Any) -> int:
    digest = hashlib.sha256(
        "\x1f".join(str(p) for p in parts).encode("utf-8")
    ).digest()
    return int.from_bytes(digest[8:16], "big") % n


@dataclass
class SynthWorld:
    """Latent tables plus (optionally) the generated sample embeddings."""

    cfg: SynthWorldConfig
    class_labels: tuple[str, ...]
    class_tokens: dict[str, tuple[str, ...]]
    content_vocab: tuple[str, ...]
    generic_vocab: tuple[str, ...]
    sample_labels: dict[str, str]
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    embeddings: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def vocabulary(self) -> tuple[str, ...]:
        return (*self.content_vocab, *self.generic_vocab)

    @property
    def superclass(self) -> str:
        return self.cfg.superclass

    def sample_class(self, sample_id: str) -> str:
        try:
            return self.sample_labels[sample_id]
        except KeyError:
            raise UnknownSample(f"sample {sample_id!r} is not in this world")

    def latent_tokens(self, sample_id: str) -> tuple[str, ...]:
        """The sample's attribute token set (its class's fixed set)."""
        return self.class_tokens[self.sample_class(sample_id)]

    def manifest(self, name: str = "synth") -> DatasetManifest:
        train = set(self.train_ids)
        records = []
        for sample_id in (*self.train_ids, *self.test_ids):
            records.append(
                ManifestRecord(
                    id=sample_id,
                    label=self.sample_labels[sample_id],
                    superclass=self.superclass,
                    split="train" if sample_id in train else "test",
                    image=sample_id,
                    embedding_ref=sample_id,
                )
            )
        return DatasetManifest(name, tuple(records))

    def image_encoder(self) -> PrecomputedEncoder:
        if not self.embeddings:
            raise MMGalleryError("this world was loaded without embeddings")
        return PrecomputedEncoder(
            self.embeddings,
            modality="image",
            dim=self.cfg.image_dim,
            encoder_id=f"synthimg:{self.cfg.seed}:{self.cfg.image_dim}",
        )

    def text_encoder(self) -> BagOfTokensEncoder:
        return BagOfTokensEncoder(
            self.vocabulary, encoder_id=f"synthtext:{self.cfg.seed}"
        )

    def chat_backend(
        self,
        hallucination_rate: float | None = None,
        genericity_rate: float | None = None,
    ) -> "SynthChatBackend":
        return SynthChatBackend(
            self, hallucination_rate=hallucination_rate,
            genericity_rate=genericity_rate,
        )

    # --- persistence ---------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": asdict(self.cfg),
            "class_labels": list(self.class_labels),
            "class_tokens": {k: list(v) for k, v in self.class_tokens.items()},
            "content_vocab": list(self.content_vocab),
            "generic_vocab": list(self.generic_vocab),
            "sample_labels": dict(self.sample_labels),
            "train_ids": list(self.train_ids),
            "test_ids": list(self.test_ids),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SynthWorld":
        return cls(
            cfg=SynthWorldConfig(**data["config"]),
            class_labels=tuple(data["class_labels"]),
            class_tokens={
                k: tuple(v) for k, v in data["class_tokens"].items()
            },
            content_vocab=tuple(data["content_vocab"]),
            generic_vocab=tuple(data["generic_vocab"]),
            sample_labels=dict(data["sample_labels"]),
            train_ids=tuple(data["train_ids"]),
            test_ids=tuple(data["test_ids"]),
        )

    @classmethod
    def load(cls, path: str | Path) -> "SynthWorld":
        """Load the latent tables (not the embeddings) from ``world.json``."""
        with open(path, "r", encoding="utf-8") as handle:
            return cls.from_dict(json.load(handle))

    def write(self, directory: str | Path) -> dict[str, Path]:
        """Materialize the world for the file-driven pipeline and CLI.

        Emits ``manifest.jsonl``, ``embeddings.jsonl``, ``vocab.txt``,
        ``world.json``, and a ready-to-use ``config.yaml``.
        """
        import yaml

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "manifest": directory / "manifest.jsonl",
            "embeddings": directory / "embeddings.jsonl",
            "vocab": directory / "vocab.txt",
            "world": directory / "world.json",
            "config": directory / "config.yaml",
        }
        save_manifest(self.manifest(), paths["manifest"])
        with open(paths["embeddings"], "w", encoding="utf-8") as handle:
            for sample_id in (*self.train_ids, *self.test_ids):
                values = self.embeddings[sample_id]
                handle.write(
                    json.dumps(
                        {
                            "id": sample_id,
                            "embedding": encode_vector_b64(values),
                            "dim": len(values),
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
        paths["vocab"].write_text(
            "".join(f"{token}\n" for token in self.vocabulary), encoding="utf-8"
        )
        with open(paths["world"], "w", encoding="utf-8") as handle:
            json.dump(self.to_dict(), handle, sort_keys=True, indent=1)
        config = {
            "seed": self.cfg.seed,
            "cache": str(directory / "descriptions.jsonl"),
            "image_encoder": {
                "modality": "image",
                "backend_kind": "precomputed-file",
                "endpoint_or_path": str(paths["embeddings"]),
                "model_id": "synthimg",
                "dim": self.cfg.image_dim,
            },
            "text_encoder": {
                "modality": "text",
                "backend_kind": "bag-of-tokens",
                "endpoint_or_path": str(paths["vocab"]),
                "model_id": "synthtext",
                "dim": 0,
            },
            "chat_backend": {
                "backend_kind": "synthetic-mock",
                "endpoint": str(paths["world"]),
                "model_id": "synthmllm",
                "temperature": 0.0,
                "max_tokens": 256,
            },
            "fusion": {
                "image_weight": 1.0,
                "text_weight": 1.0,
                "renormalize": True,
            },
            "experiment": {
                "shots": min(4, self.cfg.k_train),
                "t": 4,
                "s": 3,
                "beta": 5.5,
                "aggregation": "class-sum",
                "mode": "similar-ref",
            },
        }
        with open(paths["config"], "w", encoding="utf-8") as handle:
            yaml.safe_dump(config, handle, sort_keys=True)
        return paths


def generate_world(cfg: SynthWorldConfig) -> SynthWorld:
    """Build a world deterministically from its config (seed included)."""
    rng = np.random.default_rng(cfg.seed)
    content_vocab = tuple(f"attr{i:03d}" for i in range(cfg.vocab_size))
    generic_vocab = tuple(f"common{i:02d}" for i in range(cfg.generic_tokens))
    class_labels = tuple(f"class{i:02d}" for i in range(cfg.classes))

    class_tokens: dict[str, tuple[str, ...]] = {}
    unique_base = cfg.families * cfg.shared_tokens
    for i, label in enumerate(class_labels):
        family = i // cfg.family_size
        shared = content_vocab[
            family * cfg.shared_tokens : (family + 1) * cfg.shared_tokens
        ]
        start = unique_base + i * cfg.unique_tokens
        unique = content_vocab[start : start + cfg.unique_tokens]
        # canonical order: family-shared tokens first, unique tokens last
        class_tokens[label] = (*shared, *unique)

    prototypes: dict[str, np.ndarray] = {}
    family_base: np.ndarray | None = None
    for i, label in enumerate(class_labels):
        if i % cfg.family_size == 0:
            family_base = normalize(rng.standard_normal(cfg.image_dim)).values
        assert family_base is not None
        offset = cfg.family_spread * rng.standard_normal(cfg.image_dim)
        prototypes[label] = normalize(family_base + offset).values

    sample_labels: dict[str, str] = {}
    embeddings: dict[str, np.ndarray] = {}
    train_ids: list[str] = []
    test_ids: list[str] = []
    for label in class_labels:
        proto = prototypes[label]
        for split, count, bucket in (
            ("tr", cfg.k_train, train_ids),
            ("te", cfg.n_test, test_ids),
        ):
            for j in range(count):
                sample_id = f"{label}-{split}{j:03d}"
                if cfg.image_noise > 0:
                    noise = cfg.image_noise * rng.standard_normal(cfg.image_dim)
                    embeddings[sample_id] = normalize(proto + noise).values
                else:
                    embeddings[sample_id] = proto
                sample_labels[sample_id] = label
                bucket.append(sample_id)

    return SynthWorld(
        cfg=cfg,
        class_labels=class_labels,
        class_tokens=class_tokens,
        content_vocab=content_vocab,
        generic_vocab=generic_vocab,
        sample_labels=sample_labels,
        train_ids=tuple(train_ids),
        test_ids=tuple(test_ids),
        embeddings=embeddings,
    )


# --- the mock annotator -----------------------------------------------------


def _corrupt(
    world: SynthWorld,
    sample_id: str,
    token: str,
    hallucination_rate: float,
    genericity_rate: float,
) -> str:
    """Apply hallucination/genericity to one emitted attribute token.

    The decision draws depend only on (world seed, sample, token), so the
    corrupted set is nested as the rates grow.
    """
    seed = world.cfg.seed
    if _unit_draw(seed, "halluc", sample_id, token) < hallucination_rate:
        latent = set(world.latent_tokens(sample_id))
        eligible = [t for t in world.content_vocab if t not in latent]
        return eligible[_index_draw(len(eligible), seed, "hrep", sample_id, token)]
    if _unit_draw(seed, "generic", sample_id, token) < genericity_rate:
        pool = world.generic_vocab
        return pool[_index_draw(len(pool), seed, "grep", sample_id, token)]
    return token


def mock_mllm_respond(
    kind: str,
    sample_id: str,
    world: SynthWorld,
    *,
    refs: Sequence[str] = (),
    region: str | None = None,
    attributes: Sequence[str] = (),
    summaries: Sequence[str] = (),
    s: int = 3,
    hallucination_rate: float | None = None,
    genericity_rate: float | None = None,
) -> str:
    """Answer one captioning prompt from the latent tables.

    ``discover`` emits exactly ``s`` region names: the target class's tokens
    with those absent from the reference classes first (canonical order
    within each group), padded with generic fillers if the class has fewer
    than ``s``. ``describe`` emits the latent token behind a region, subject
    to corruption. ``summarize`` joins the attribute texts it was shown;
    ``aggregate`` joins the distinct tokens of several summaries; ``naive``
    emits a short generic caption with minimal class signal.
    """
    if kind not in PROMPT_KINDS:
        raise ValueError(f"unknown prompt kind {kind!r}")
    h_rate = (
        world.cfg.hallucination_rate
        if hallucination_rate is None
        else hallucination_rate
    )
    g_rate = (
        world.cfg.genericity_rate if genericity_rate is None else genericity_rate
    )

    if kind == "aggregate":
        seen: list[str] = []
        for summary in summaries:
            for token in summary.split():
                if token not in seen:
                    seen.append(token)
        return " ".join(seen)

    label = world.sample_class(sample_id)
    tokens = world.class_tokens[label]

    if kind == "discover":
        contrast_classes = set()
        for ref in refs:
            if ref in world.sample_labels:
                contrast_classes.add(world.sample_labels[ref])
        # a reference that looks identical to the target offers no contrast
        contrast_classes.discard(label)
        foreign: set[str] = set()
        for other in contrast_classes:
            foreign.update(world.class_tokens[other])
        ordered = [t for t in tokens if t not in foreign] + [
            t for t in tokens if t in foreign
        ]
        while len(ordered) < s:
            ordered.append(
                world.generic_vocab[len(ordered) % len(world.generic_vocab)]
            )
        return "\n".join(f"{i + 1}. {name}" for i, name in enumerate(ordered[:s]))

    if kind == "describe":
        if region is None:
            raise ValueError("describe needs a region name")
        if region in tokens:
            return _corrupt(world, sample_id, region, h_rate, g_rate)
        return region  # generic filler regions echo themselves

    if kind == "summarize":
        return " ".join(attributes)

    # naive: first canonical tokens plus generic padding, still corruptible
    content = [
        _corrupt(world, sample_id, token, h_rate, g_rate)
        for token in tokens[: world.cfg.naive_content_tokens]
    ]
    generics = [
        world.generic_vocab[
            _index_draw(len(world.generic_vocab), world.cfg.seed, "naive", sample_id, i)
        ]
        for i in range(world.cfg.naive_generic_tokens)
    ]
    return " ".join((*content, *generics))


class SynthChatBackend:
    """Chat backend answering the default captioning prompts for one world.

    The prompt stage and its arguments are recovered from the rendered text
    and the attached image references (the target image is always last), so
    the production captioner runs against this backend unchanged. Custom
    prompt templates are not understood here; synthetic worlds pin the
    default templates.
    """

    _DISCOVER = re.compile(r"generate (\d+) discriminative visual regions")
    _DESCRIBE = re.compile(
        r"Describe the visual attributes of the (.+?) in the .+? category"
    )
    _ATTRIBUTES = re.compile(r"Attributes: (.*)")

    def __init__(
        self,
        world: SynthWorld,
        *,
        hallucination_rate: float | None = None,
        genericity_rate: float | None = None,
    ) -> None:
        self.world = world
        self.hallucination_rate = (
            world.cfg.hallucination_rate
            if hallucination_rate is None
            else hallucination_rate
        )
        self.genericity_rate = (
            world.cfg.genericity_rate
            if genericity_rate is None
            else genericity_rate
        )
        self.calls = 0
        self.backend_id = (
            f"synthetic:{world.cfg.seed}"
            f":h{self.hallucination_rate}:g{self.genericity_rate}"
        )

    def _respond(self, kind: str, sample_id: str, **kwargs) -> str:
        return mock_mllm_respond(
            kind,
            sample_id,
            self.world,
            hallucination_rate=self.hallucination_rate,
            genericity_rate=self.genericity_rate,
            **kwargs,
        )

    def complete(self, messages: list[dict[str, Any]]) -> str:
        self.calls += 1
        text = ""
        images: list[str] = []
        for message in messages:
            for part in message.get("content", []):
                if part.get("type") == "text":
                    text += part.get("text", "")
                elif part.get("type") == "image_url":
                    images.append(part["image_url"]["url"])
        target = images[-1] if images else ""

        match = self._DISCOVER.search(text)
        if match:
            return self._respond(
                "discover", target, refs=images[:-1], s=int(match.group(1))
            )
        match = self._DESCRIBE.search(text)
        if match:
            return self._respond("describe", target, region=match.group(1))
        if "Summarize the information" in text:
            match = self._ATTRIBUTES.search(text)
            attributes = match.group(1).split("; ") if match else []
            return self._respond("summarize", target, attributes=attributes)
        if "Combine the following descriptions" in text:
            summaries = [
                line[2:].strip()
                for line in text.splitlines()
                if line.startswith("- ")
            ]
            return self._respond("aggregate", "", summaries=summaries)
        if "Describe this" in text:
            return self._respond("naive", target)
        raise MMGalleryError(
            f"synthetic backend cannot interpret prompt: {text[:80]!r}"
        )
