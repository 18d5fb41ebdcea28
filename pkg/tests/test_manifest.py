"""Dataset manifest records, splits, and JSONL round-trips."""

from __future__ import annotations

import pytest

from mmgallery.errors import DuplicateSampleId, EmptyManifest, MMGalleryError
from mmgallery.manifest import (
    DatasetManifest,
    ManifestRecord,
    load_manifest,
    save_manifest,
)


def _record(i, label="sparrow", split="train", **kw):
    kw.setdefault("image", f"img-{i}.png")
    return ManifestRecord(
        id=f"{label}-{split}-{i}", label=label, superclass="bird", split=split, **kw
    )


def test_record_validation():
    with pytest.raises(ValueError):
        ManifestRecord(id="", label="a", superclass="b", split="train", image="x")
    with pytest.raises(ValueError):
        ManifestRecord(id="r", label="", superclass="b", split="train", image="x")
    with pytest.raises(ValueError):
        ManifestRecord(id="r", label="a", superclass="", split="train", image="x")
    with pytest.raises(ValueError):
        ManifestRecord(id="r", label="a", superclass="b", split="dev", image="x")
    with pytest.raises(ValueError):
        ManifestRecord(id="r", label="a", superclass="b", split="train")


def test_content_ref_prefers_image():
    both = ManifestRecord(
        id="r", label="a", superclass="b", split="train",
        image="pic.png", embedding_ref="emb-1",
    )
    assert both.content_ref == "pic.png"
    emb_only = ManifestRecord(
        id="r", label="a", superclass="b", split="train", embedding_ref="emb-1"
    )
    assert emb_only.content_ref == "emb-1"


def test_manifest_rejects_duplicate_ids():
    record = _record(0)
    with pytest.raises(DuplicateSampleId):
        DatasetManifest("d", (record, record))


def test_split_and_classes():
    records = (
        _record(0, "sparrow", "train"),
        _record(1, "sparrow", "test"),
        _record(2, "finch", "train"),
        _record(3, "wren", "test"),
    )
    manifest = DatasetManifest("d", records)
    assert [r.id for r in manifest.split("train")] == [
        "sparrow-train-0", "finch-train-2",
    ]
    assert manifest.classes() == ["finch", "sparrow", "wren"]
    assert manifest.classes("train") == ["finch", "sparrow"]
    assert manifest.record("wren-test-3").label == "wren"
    with pytest.raises(KeyError):
        manifest.record("missing")


def test_round_trip(tmp_path):
    manifest = DatasetManifest(
        "demo",
        (
            _record(0, "sparrow", "train", embedding_ref="e0"),
            _record(1, "finch", "test"),
        ),
    )
    path = tmp_path / "manifest.jsonl"
    save_manifest(manifest, path)
    loaded = load_manifest(path, name="demo")
    assert loaded == manifest
    # default name comes from the file stem
    assert load_manifest(path).name == "manifest"


def test_load_errors(tmp_path):
    with pytest.raises(EmptyManifest):
        load_manifest(tmp_path / "nope.jsonl")
    empty = tmp_path / "empty.jsonl"
    empty.write_text("\n\n", encoding="utf-8")
    with pytest.raises(EmptyManifest):
        load_manifest(empty)
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "x", "label": "a"}\n', encoding="utf-8")
    with pytest.raises(MMGalleryError, match="line 1"):
        load_manifest(bad)
    not_json = tmp_path / "not.jsonl"
    not_json.write_text("oops\n", encoding="utf-8")
    with pytest.raises(MMGalleryError, match="line 1"):
        load_manifest(not_json)


def test_blank_lines_skipped(tmp_path):
    path = tmp_path / "gaps.jsonl"
    path.write_text(
        '{"id": "a1", "label": "a", "superclass": "s", "split": "train", '
        '"image": "a.png"}\n'
        "\n"
        '{"id": "a2", "label": "a", "superclass": "s", "split": "test", '
        '"image": "b.png"}\n',
        encoding="utf-8",
    )
    assert len(load_manifest(path).records) == 2
