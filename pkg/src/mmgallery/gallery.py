"""The key-value gallery: fused image+text keys labeled by category.

Fusion concatenates the two unit-normalized modality vectors under
per-modality weights and renormalizes, so the cosine between two fused
vectors decomposes into a weighted sum of the per-modality cosines. Keys
are quantized to single precision when an entry is built; persistence and
reload are therefore bit-exact, while all similarity arithmetic stays in
double precision.

File format (JSONL): line one is a metadata object carrying a
``sha256`` checksum over every following byte; each further line is one
entry ``{"sample_id", "label", "description_key", "fused"}`` with the
vector base64-encoded over little-endian 32-bit floats.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .captioner import StructuredDescription, aggregate_category_text
from .encoders import (
    EmbeddingVector,
    batch_embed,
    decode_vector_b64,
    embed_text,
    encode_vector_b64,
    normalize,
)
from .errors import (
    ChecksumMismatch,
    ClassAlreadyPresent,
    DuplicateSampleId,
    GalleryFormatError,
    GalleryNotFound,
    MMGalleryError,
    TruncatedFile,
    VersionMismatch,
    ZeroVector,
)
from .manifest import ManifestRecord
from .selector import ClassCenter, choose_references, compute_class_centers

logger = logging.getLogger(__name__)

GALLERY_VERSION = 1


@dataclass(frozen=True)
class FusionConfig:
    """Weights for concatenating the image and text blocks of a key."""

    image_weight: float = 1.0
    text_weight: float = 1.0
    renormalize: bool = True
    mode: str = "concat"

    def __post_init__(self) -> None:
        if self.mode != "concat":
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        if self.image_weight < 0 or self.text_weight < 0:
            raise ValueError("fusion weights must be non-negative")
        if self.image_weight + self.text_weight <= 0:
            raise ValueError("at least one fusion weight must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {
            "image_weight": self.image_weight,
            "text_weight": self.text_weight,
            "renormalize": self.renormalize,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "FusionConfig":
        return cls(
            image_weight=float(data.get("image_weight", 1.0)),
            text_weight=float(data.get("text_weight", 1.0)),
            renormalize=bool(data.get("renormalize", True)),
            mode=str(data.get("mode", "concat")),
        )


def fuse(
    image: EmbeddingVector, text: EmbeddingVector, cfg: FusionConfig
) -> EmbeddingVector:
    """Weighted concatenation of two unit vectors, renormalized by default."""
    parts = np.concatenate(
        (cfg.image_weight * image.values, cfg.text_weight * text.values)
    )
    if not cfg.renormalize:
        return EmbeddingVector(parts)
    return normalize(parts)


def _quantize32(vector: EmbeddingVector) -> EmbeddingVector:
    """Round to the nearest single-precision values (kept in float64)."""
    return EmbeddingVector(np.asarray(vector.values, dtype="<f4").astype(np.float64))


@dataclass(frozen=True)
class GalleryEntry:
    sample_id: str
    label: str
    description_key: str
    fused: EmbeddingVector


@dataclass(frozen=True)
class GalleryMetadata:
    class_labels: tuple[str, ...]
    dim_image: int
    dim_text: int
    image_encoder: str
    text_encoder: str
    fusion: FusionConfig
    k: int
    seed: int = 0
    version: int = GALLERY_VERSION
    pipeline: dict[str, Any] = field(default_factory=dict)

    @property
    def c(self) -> int:
        return len(self.class_labels)

    @property
    def dim(self) -> int:
        return self.dim_image + self.dim_text

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "class_labels": list(self.class_labels),
            "dim_image": self.dim_image,
            "dim_text": self.dim_text,
            "image_encoder": self.image_encoder,
            "text_encoder": self.text_encoder,
            "fusion": self.fusion.to_dict(),
            "k": self.k,
            "seed": self.seed,
            "pipeline": dict(self.pipeline),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GalleryMetadata":
        return cls(
            class_labels=tuple(data["class_labels"]),
            dim_image=int(data["dim_image"]),
            dim_text=int(data["dim_text"]),
            image_encoder=str(data["image_encoder"]),
            text_encoder=str(data["text_encoder"]),
            fusion=FusionConfig.from_dict(data["fusion"]),
            k=int(data["k"]),
            seed=int(data.get("seed", 0)),
            version=int(data["version"]),
            pipeline=dict(data.get("pipeline", {})),
        )


class Gallery:
    """Immutable collection of fused keys plus the metadata describing them."""

    def __init__(
        self, metadata: GalleryMetadata, entries: Sequence[GalleryEntry]
    ) -> None:
        seen: set[str] = set()
        labels = set(metadata.class_labels)
        for entry in entries:
            if entry.sample_id in seen:
                raise DuplicateSampleId(f"duplicate sample id {entry.sample_id!r}")
            seen.add(entry.sample_id)
            if entry.label not in labels:
                raise GalleryFormatError(
                    f"entry {entry.sample_id!r} has label {entry.label!r} "
                    "not in the metadata class list"
                )
            if entry.fused.dim != metadata.dim:
                raise GalleryFormatError(
                    f"entry {entry.sample_id!r} has dim {entry.fused.dim}, "
                    f"metadata says {metadata.dim}"
                )
        self.metadata = metadata
        self.entries: tuple[GalleryEntry, ...] = tuple(entries)
        self._key_matrix: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def key_matrix(self) -> np.ndarray:
        """(n_entries, dim) float64 matrix of fused keys, row i = entry i."""
        if self._key_matrix is None:
            matrix = np.stack([e.fused.values for e in self.entries])
            matrix.flags.writeable = False
            self._key_matrix = matrix
        return self._key_matrix

    def class_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {label: 0 for label in self.metadata.class_labels}
        for entry in self.entries:
            counts[entry.label] += 1
        return counts

    def image_block_embeddings(self) -> dict[str, EmbeddingVector]:
        """Recover per-entry image directions from the stored keys.

        The image block of a fused key is the image embedding scaled by the
        image weight and the renormalization factor, so slicing and
        renormalizing reproduces it (up to storage precision).
        """
        if self.metadata.dim_image == 0 or self.metadata.fusion.image_weight == 0:
            raise ZeroVector(
                "gallery keys carry no image block; cannot recover image "
                "embeddings"
            )
        dim = self.metadata.dim_image
        return {
            e.sample_id: normalize(e.fused.values[:dim]) for e in self.entries
        }

    def image_class_centers(self) -> list[ClassCenter]:
        embeddings = self.image_block_embeddings()
        labels = {e.sample_id: e.label for e in self.entries}
        return compute_class_centers(embeddings, labels)


# --- construction -----------------------------------------------------------


@dataclass
class GalleryBuildConfig:
    """Knobs for turning support samples into gallery entries."""

    fusion: FusionConfig = field(default_factory=FusionConfig)
    t: int = 4
    reference_policy: str = "similar"  # similar | random | none
    representative: str = "target"
    category_text: bool = False
    seed: int = 0
    max_in_flight: int = 1
    k: int | None = None  # metadata hint; defaults to the largest class count


def _entry_vector(
    image_vec: EmbeddingVector,
    text_vec: EmbeddingVector | None,
    fusion: FusionConfig,
) -> EmbeddingVector:
    if text_vec is None:
        # image-only ablation: the key is just the image block
        return _quantize32(image_vec)
    return _quantize32(fuse(image_vec, text_vec, fusion))


def build_gallery(
    records: Sequence[ManifestRecord],
    image_encoder,
    text_encoder,
    captioner,
    cfg: GalleryBuildConfig,
) -> Gallery:
    """Caption, embed, fuse, and label every support sample.

    ``captioner`` may be None (image-only ablation; ``text_encoder`` is then
    unused). References for each sample are drawn from the other classes of
    the support set according to ``cfg.reference_policy``.
    """
    if not records:
        raise MMGalleryError("cannot build a gallery from zero records")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DuplicateSampleId("support records repeat a sample id")

    image_vectors = dict(
        zip(
            ids,
            batch_embed(
                [r.content_ref for r in records],
                image_encoder,
                cfg.max_in_flight,
            ),
        )
    )
    labels = {r.id: r.label for r in records}
    image_ref_of = {r.id: r.content_ref for r in records}
    centers = compute_class_centers(image_vectors, labels)

    def describe(
        record: ManifestRecord,
    ) -> tuple[StructuredDescription, str] | None:
        if captioner is None:
            return None
        refs = choose_references(
            cfg.reference_policy,
            image_vectors[record.id],
            centers,
            image_vectors,
            cfg.t,
            exclude_label=record.label,
            seed=cfg.seed,
            representative=cfg.representative,
            target_id=record.id,
        )
        description = captioner.caption(
            record.content_ref,
            record.superclass,
            [image_ref_of[sid] for sid in refs.sample_ids],
            sample_id=record.id,
            reference_ids=refs.sample_ids,
        )
        return description, _caption_key(captioner, record.id, refs.sample_ids)

    descriptions: dict[str, tuple[StructuredDescription, str] | None]
    if cfg.max_in_flight > 1 and captioner is not None:
        with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
            futures = {r.id: pool.submit(describe, r) for r in records}
            descriptions = {rid: f.result() for rid, f in futures.items()}
    else:
        descriptions = {r.id: describe(r) for r in records}

    category_texts: dict[str, str] = {}
    if cfg.category_text and captioner is not None:
        for center in centers:
            summaries = [
                descriptions[r.id][0].summary  # type: ignore[index]
                for r in records
                if r.label == center.class_label
            ]
            superclass = next(
                r.superclass for r in records if r.label == center.class_label
            )
            category_texts[center.class_label] = aggregate_category_text(
                summaries, superclass, captioner.backend, captioner.templates
            )

    entries = []
    dim_text = 0
    for record in records:
        described = descriptions[record.id]
        image_vec = image_vectors[record.id]
        if described is None:
            text_vec = None
            key = ""
        else:
            description, key = described
            text = category_texts.get(record.label, description.summary)
            text_vec = embed_text(text, text_encoder)
            dim_text = text_vec.dim
        entries.append(
            GalleryEntry(
                sample_id=record.id,
                label=record.label,
                description_key=key,
                fused=_entry_vector(image_vec, text_vec, cfg.fusion),
            )
        )

    counts: dict[str, int] = {}
    for record in records:
        counts[record.label] = counts.get(record.label, 0) + 1
    metadata = GalleryMetadata(
        class_labels=tuple(sorted(counts)),
        dim_image=image_encoder.dim,
        dim_text=dim_text,
        image_encoder=image_encoder.encoder_id,
        text_encoder=text_encoder.encoder_id if dim_text else "",
        fusion=cfg.fusion,
        k=cfg.k if cfg.k is not None else max(counts.values()),
        seed=cfg.seed,
        pipeline=_pipeline_echo(cfg, captioner, records),
    )
    return Gallery(metadata, entries)


def _caption_key(captioner, sample_id: str, reference_ids: Sequence[str]) -> str:
    # the same recipe hash the caption cache uses, recorded on the entry
    from .captioner import description_key

    return description_key(
        sample_id,
        captioner.backend.backend_id,
        captioner.templates.template_hash(),
        captioner.s,
        reference_ids if captioner.kind == "structured" else (),
        kind=captioner.kind,
    )


def _pipeline_echo(
    cfg: GalleryBuildConfig, captioner, records: Sequence[ManifestRecord]
) -> dict[str, Any]:
    return {
        "reference_policy": cfg.reference_policy,
        "t": cfg.t,
        "s": getattr(captioner, "s", 0),
        "captioner": getattr(captioner, "kind", "none"),
        "template_hash": (
            captioner.templates.template_hash() if captioner is not None else ""
        ),
        "chat_backend": (
            captioner.backend.backend_id if captioner is not None else ""
        ),
        "category_text": cfg.category_text,
        "representative": cfg.representative,
        "superclass_default": records[0].superclass,
    }


def insert_category(
    gallery: Gallery,
    new_records: Sequence[ManifestRecord],
    image_encoder,
    text_encoder,
    captioner,
) -> Gallery:
    """Add one new class without touching existing entries.

    References for the new samples come from the classes already present;
    prior entries are reused as-is, so their keys stay bit-identical.
    """
    if not new_records:
        raise MMGalleryError("insert_category needs at least one record")
    new_labels = {r.label for r in new_records}
    if len(new_labels) != 1:
        raise MMGalleryError(
            f"insert_category takes exactly one class, got {sorted(new_labels)}"
        )
    label = next(iter(new_labels))
    if label in gallery.metadata.class_labels:
        raise ClassAlreadyPresent(f"class {label!r} is already in the gallery")
    existing_ids = {e.sample_id for e in gallery.entries}
    for record in new_records:
        if record.id in existing_ids:
            raise DuplicateSampleId(
                f"sample {record.id!r} is already in the gallery"
            )

    cfg = GalleryBuildConfig(
        fusion=gallery.metadata.fusion,
        t=int(gallery.metadata.pipeline.get("t", 4)),
        reference_policy=str(
            gallery.metadata.pipeline.get("reference_policy", "similar")
        ),
        representative=str(
            gallery.metadata.pipeline.get("representative", "target")
        ),
        seed=gallery.metadata.seed,
    )

    new_entries = []
    if captioner is None:
        centers: list[ClassCenter] = []
        member_vectors: dict[str, EmbeddingVector] = {}
    else:
        member_vectors = gallery.image_block_embeddings()
        centers = gallery.image_class_centers()
    for record in new_records:
        image_vec = image_encoder.embed(record.content_ref)
        if captioner is None:
            text_vec = None
            key = ""
        else:
            refs = choose_references(
                cfg.reference_policy,
                image_vec,
                centers,
                member_vectors,
                cfg.t,
                exclude_label=record.label,
                seed=cfg.seed,
                representative=cfg.representative,
                target_id=record.id,
            )
            description = captioner.caption(
                record.content_ref,
                record.superclass,
                # existing members are addressed by sample id; backends that
                # need pixel content should be given resolvable ids
                list(refs.sample_ids),
                sample_id=record.id,
                reference_ids=refs.sample_ids,
            )
            text_vec = embed_text(description.summary, text_encoder)
            key = _caption_key(captioner, record.id, refs.sample_ids)
        new_entries.append(
            GalleryEntry(
                sample_id=record.id,
                label=record.label,
                description_key=key,
                fused=_entry_vector(image_vec, text_vec, gallery.metadata.fusion),
            )
        )

    metadata = replace(
        gallery.metadata,
        class_labels=tuple(sorted((*gallery.metadata.class_labels, label))),
    )
    return Gallery(metadata, (*gallery.entries, *new_entries))


# --- persistence ------------------------------------------------------------


def _entry_line(entry: GalleryEntry) -> str:
    return json.dumps(
        {
            "sample_id": entry.sample_id,
            "label": entry.label,
            "description_key": entry.description_key,
            "fused": encode_vector_b64(entry.fused.values),
        },
        sort_keys=True,
        separators=(",", ":"),
    )


def save_gallery(gallery: Gallery, path: str | Path) -> None:
    """Write atomically; the metadata line carries a checksum of the body."""
    path = Path(path)
    body = "".join(_entry_line(e) + "\n" for e in gallery.entries).encode("utf-8")
    meta = gallery.metadata.to_dict()
    meta["entry_count"] = len(gallery.entries)
    meta["checksum"] = hashlib.sha256(body).hexdigest()
    handle, tmp_name = tempfile.mkstemp(
        dir=path.parent or Path("."), prefix=f".{path.name}."
    )
    try:
        with os.fdopen(handle, "wb") as tmp:
            tmp.write(
                json.dumps(meta, sort_keys=True, separators=(",", ":")).encode(
                    "utf-8"
                )
                + b"\n"
            )
            tmp.write(body)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def load_gallery(path: str | Path) -> Gallery:
    """Inverse of :func:`save_gallery`, verifying version and checksum."""
    path = Path(path)
    if not path.exists():
        raise GalleryNotFound(f"gallery file {path} does not exist")
    with open(path, "rb") as handle:
        meta_line = handle.readline()
        if not meta_line.strip():
            raise TruncatedFile(f"{path} is missing its metadata line")
        try:
            meta = json.loads(meta_line)
        except ValueError as exc:
            raise GalleryFormatError(f"{path}: bad metadata line: {exc}") from exc
        version = meta.get("version")
        if version != GALLERY_VERSION:
            raise VersionMismatch(
                f"{path} has format version {version!r}, "
                f"this build reads version {GALLERY_VERSION}"
            )
        body = handle.read()
    digest = hashlib.sha256(body).hexdigest()
    if digest != meta.get("checksum"):
        raise ChecksumMismatch(
            f"{path}: checksum {digest[:12]}... does not match the recorded "
            f"value"
        )
    lines = body.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    expected = int(meta.get("entry_count", -1))
    if len(lines) != expected:
        raise TruncatedFile(
            f"{path}: found {len(lines)} entries, metadata records {expected}"
        )
    try:
        metadata = GalleryMetadata.from_dict(meta)
    except (KeyError, TypeError, ValueError) as exc:
        raise GalleryFormatError(f"{path}: bad metadata fields: {exc}") from exc
    entries = []
    for lineno, raw in enumerate(lines, start=2):
        try:
            row = json.loads(raw)
            entries.append(
                GalleryEntry(
                    sample_id=row["sample_id"],
                    label=row["label"],
                    description_key=row["description_key"],
                    fused=EmbeddingVector(
                        decode_vector_b64(row["fused"], metadata.dim)
                    ),
                )
            )
        except (ValueError, TypeError, KeyError) as exc:
            raise GalleryFormatError(
                f"{path}: bad entry at line {lineno}: {exc}"
            ) from exc
    return Gallery(metadata, entries)
