"""Dataset manifests: one JSONL record per sample.

Record schema: ``{"id", "image", "embedding_ref", "label", "superclass",
"split"}`` where ``image`` points at pixel content (path or URL) and
``embedding_ref`` at a precomputed-embedding id; at least one of the two
must be present.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import DuplicateSampleId, EmptyManifest, MMGalleryError

SPLITS = ("train", "test")


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    label: str
    superclass: str
    split: str
    image: str | None = None
    embedding_ref: str | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("record id must be non-empty")
        if not self.label or not self.superclass:
            raise ValueError(f"record {self.id!r} needs a label and a superclass")
        if self.split not in SPLITS:
            raise ValueError(f"record {self.id!r} has unknown split {self.split!r}")
        if self.image is None and self.embedding_ref is None:
            raise ValueError(
                f"record {self.id!r} needs an image or an embedding_ref"
            )

    @property
    def content_ref(self) -> str:
        """The reference handed to the image encoder."""
        ref = self.image if self.image is not None else self.embedding_ref
        assert ref is not None
        return ref


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    records: tuple[ManifestRecord, ...]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for record in self.records:
            if record.id in seen:
                raise DuplicateSampleId(f"manifest repeats sample id {record.id!r}")
            seen.add(record.id)

    def split(self, tag: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == tag]

    def classes(self, tag: str | None = None) -> list[str]:
        labels = {
            r.label for r in self.records if tag is None or r.split == tag
        }
        return sorted(labels)

    def record(self, sample_id: str) -> ManifestRecord:
        for r in self.records:
            if r.id == sample_id:
                return r
        raise KeyError(sample_id)


def load_manifest(path: str | Path, name: str | None = None) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise EmptyManifest(f"manifest {path} does not exist")
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                records.append(
                    ManifestRecord(
                        id=row["id"],
                        label=row["label"],
                        superclass=row["superclass"],
                        split=row["split"],
                        image=row.get("image"),
                        embedding_ref=row.get("embedding_ref"),
                    )
                )
            except (ValueError, TypeError, KeyError) as exc:
                raise MMGalleryError(
                    f"{path}: bad manifest record at line {lineno}: {exc}"
                ) from exc
    if not records:
        raise EmptyManifest(f"manifest {path} has no records")
    return DatasetManifest(name or path.stem, tuple(records))


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for r in manifest.records:
            handle.write(
                json.dumps(
                    {
                        "id": r.id,
                        "image": r.image,
                        "embedding_ref": r.embedding_ref,
                        "label": r.label,
                        "superclass": r.superclass,
                        "split": r.split,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
