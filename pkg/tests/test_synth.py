"""Synthetic-world generation, the mock annotator, and world persistence."""

from __future__ import annotations

import numpy as np
import pytest

from mmgallery.captioner import Captioner, PromptTemplates, parse_region_list
from mmgallery.config import load_config_file
from mmgallery.encoders import PrecomputedEncoder
from mmgallery.errors import InvalidConfig, MMGalleryError, UnknownSample
from mmgallery.harness import ExperimentConfig
from mmgallery.manifest import load_manifest
from mmgallery.synth import (
    SynthChatBackend,
    SynthWorld,
    SynthWorldConfig,
    generate_world,
    mock_mllm_respond,
)


def _world(**overrides):
    cfg = dict(classes=4, k_train=3, n_test=2, seed=3)
    cfg.update(overrides)
    return generate_world(SynthWorldConfig(**cfg))


# --- configuration ---------------------------------------------------------


@pytest.mark.parametrize(
    "overrides",
    [
        {"classes": 0},
        {"k_train": 0},
        {"n_test": -1},
        {"family_size": 0},
        {"shared_tokens": 4, "attrs_per_class": 4},
        {"shared_tokens": -1},
        {"family_size": 1, "shared_tokens": 2},
        {"image_dim": 1},
        {"family_spread": 0.0},
        {"image_noise": -0.1},
        {"hallucination_rate": 1.5},
        {"genericity_rate": -0.2},
        {"generic_tokens": 0},
        {"naive_content_tokens": 0},
        {"classes": 30, "vocab_size": 64},  # token demand 90 > 64
    ],
)
def test_config_validation(overrides):
    with pytest.raises(InvalidConfig):
        SynthWorldConfig(**overrides)


def test_config_token_accounting():
    cfg = SynthWorldConfig(classes=5, family_size=2, attrs_per_class=4,
                           shared_tokens=2)
    assert cfg.families == 3
    assert cfg.unique_tokens == 2
    assert cfg.token_demand == 3 * 2 + 5 * 2


# --- generation -----------------------------------------------------------


def test_generation_is_deterministic():
    a, b = _world(image_noise=0.4), _world(image_noise=0.4)
    assert a.class_tokens == b.class_tokens
    assert a.train_ids == b.train_ids
    for sid in a.embeddings:
        assert np.array_equal(a.embeddings[sid], b.embeddings[sid])
    assert _world(seed=4).class_tokens != {}  # different seed still valid


def test_class_token_layout():
    world = _world()
    # frozen layout for the default family/attr sizes at classes=4
    assert world.class_tokens["class00"] == (
        "attr000", "attr001", "attr004", "attr005",
    )
    assert world.class_tokens["class01"] == (
        "attr000", "attr001", "attr006", "attr007",
    )
    assert world.class_tokens["class02"] == (
        "attr002", "attr003", "attr008", "attr009",
    )
    # siblings share exactly the family block, unique suffixes are disjoint
    shared = set(world.class_tokens["class00"]) & set(world.class_tokens["class01"])
    assert shared == {"attr000", "attr001"}
    across = set(world.class_tokens["class00"]) & set(world.class_tokens["class02"])
    assert across == set()


def test_noiseless_samples_equal_their_prototype():
    world = _world(image_noise=0.0)
    by_label = {}
    for sid, label in world.sample_labels.items():
        vec = world.embeddings[sid]
        assert abs(np.linalg.norm(vec) - 1.0) < 1e-12
        if label in by_label:
            assert np.array_equal(vec, by_label[label])
        else:
            by_label[label] = vec


def test_noisy_samples_spread_but_stay_unit():
    world = _world(image_noise=0.5)
    first, second = world.train_ids[0], world.train_ids[1]
    assert world.sample_labels[first] == world.sample_labels[second]
    assert not np.array_equal(world.embeddings[first], world.embeddings[second])
    for vec in world.embeddings.values():
        assert abs(np.linalg.norm(vec) - 1.0) < 1e-12


def test_manifest_and_lookup():
    world = _world()
    manifest = world.manifest("demo")
    assert manifest.name == "demo"
    assert len(manifest.split("train")) == 4 * 3
    assert len(manifest.split("test")) == 4 * 2
    record = manifest.record("class01-tr000")
    assert record.label == "class01"
    assert record.superclass == "specimen"
    assert record.image == record.embedding_ref == "class01-tr000"
    assert world.sample_class("class01-tr000") == "class01"
    assert world.latent_tokens("class01-tr000") == world.class_tokens["class01"]
    with pytest.raises(UnknownSample):
        world.sample_class("nobody")


# --- the mock annotator ------------------------------------------------------


def test_discover_prefers_tokens_absent_from_references():
    world = _world()
    target = "class00-tr000"
    sibling_ref = "class01-tr001"  # shares attr000/attr001 with the target
    reply = mock_mllm_respond("discover", target, world, refs=[sibling_ref], s=3)
    assert parse_region_list(reply) == ["attr004", "attr005", "attr000"]
    # a reference from another family shares nothing: canonical order
    far_ref = "class02-tr000"
    reply = mock_mllm_respond("discover", target, world, refs=[far_ref], s=3)
    assert parse_region_list(reply) == ["attr000", "attr001", "attr004"]
    # no references (or same-class ones) leave the canonical order too
    reply = mock_mllm_respond("discover", target, world, refs=[target], s=3)
    assert parse_region_list(reply) == ["attr000", "attr001", "attr004"]


def test_discover_pads_with_generics_when_class_is_small():
    world = _world(attrs_per_class=2, shared_tokens=1)
    reply = mock_mllm_respond("discover", "class00-tr000", world, s=4)
    names = parse_region_list(reply)
    assert len(names) == 4
    assert names[:2] == list(world.class_tokens["class00"])
    assert all(name.startswith("common") for name in names[2:])


def test_describe_echoes_latent_token_when_clean():
    world = _world()
    token = world.class_tokens["class00"][0]
    assert mock_mllm_respond(
        "describe", "class00-tr000", world, region=token
    ) == token
    # foreign regions (generic fillers) echo themselves
    assert mock_mllm_respond(
        "describe", "class00-tr000", world, region="common01"
    ) == "common01"
    with pytest.raises(ValueError):
        mock_mllm_respond("describe", "class00-tr000", world)


def test_summarize_and_aggregate():
    world = _world()
    joined = mock_mllm_respond(
        "summarize", "class00-tr000", world, attributes=["a b", "c"]
    )
    assert joined == "a b c"
    merged = mock_mllm_respond(
        "aggregate", "", world, summaries=["a b", "b c", "a"]
    )
    assert merged == "a b c"


def test_naive_caption_shape_and_determinism():
    world = _world()
    reply = mock_mllm_respond("naive", "class00-tr000", world)
    tokens = reply.split()
    assert len(tokens) == 1 + 2  # naive_content_tokens + naive_generic_tokens
    assert tokens[0] == "attr000"
    assert all(t.startswith("common") for t in tokens[1:])
    assert mock_mllm_respond("naive", "class00-tr000", world) == reply


def test_unknown_prompt_kind():
    with pytest.raises(ValueError):
        mock_mllm_respond("interrogate", "class00-tr000", _world())


def test_corruption_draws_are_nested_across_rates():
    world = _world()
    rates = [0.1, 0.3, 0.7, 1.0]
    previous: set[tuple[str, str]] = set()
    for rate in rates:
        corrupted = set()
        for sid in world.train_ids:
            for token in world.latent_tokens(sid):
                reply = mock_mllm_respond(
                    "describe", sid, world, region=token,
                    hallucination_rate=rate,
                )
                if reply != token:
                    corrupted.add((sid, token))
                    # hallucinations are never latent tokens of the sample
                    assert reply not in world.latent_tokens(sid)
        assert previous <= corrupted
        previous = corrupted
    assert len(previous) == len(world.train_ids) * 4  # rate 1.0 corrupts all


def test_genericity_draws_replace_with_fillers():
    world = _world()
    replies = {
        mock_mllm_respond(
            "describe", sid, world, region=world.latent_tokens(sid)[0],
            genericity_rate=1.0,
        )
        for sid in world.train_ids
    }
    assert all(reply.startswith("common") for reply in replies)


# --- the chat backend wrapper -------------------------------------------------


def test_chat_backend_matches_direct_mock_calls():
    world = _world(hallucination_rate=0.4, seed=21)
    backend = world.chat_backend()
    captioner = Captioner(backend, s=3)
    target, refs = "class00-tr000", ["class01-tr001", "class02-tr000"]
    description = captioner.caption(
        target, world.superclass, refs, sample_id=target, reference_ids=refs
    )
    expected_regions = parse_region_list(
        mock_mllm_respond("discover", target, world, refs=refs, s=3)
    )
    expected_attrs = [
        mock_mllm_respond("describe", target, world, region=region)
        for region in expected_regions
    ]
    assert list(description.regions) == expected_regions
    assert list(description.region_attributes) == expected_attrs
    assert description.summary == " ".join(expected_attrs)
    assert backend.calls == 5  # discover + 3 describes + summarize


def test_chat_backend_rate_override_and_id():
    world = _world(hallucination_rate=0.4)
    default = world.chat_backend()
    assert default.hallucination_rate == 0.4
    clean = world.chat_backend(hallucination_rate=0.0)
    assert clean.hallucination_rate == 0.0
    assert default.backend_id != clean.backend_id
    assert "synthetic" in default.backend_id


def test_chat_backend_rejects_foreign_prompts():
    world = _world()
    backend = SynthChatBackend(world)
    with pytest.raises(MMGalleryError):
        backend.complete(
            [{"role": "user", "content": [{"type": "text", "text": "hi there"}]}]
        )


def test_naive_prompt_routing():
    world = _world()
    backend = world.chat_backend()
    templates = PromptTemplates()
    from mmgallery.captioner import naive_caption

    description = naive_caption(
        "class00-tr000", world.superclass, backend, templates
    )
    assert description.summary == mock_mllm_respond(
        "naive", "class00-tr000", world
    )


# --- persistence -------------------------------------------------------------


def test_world_dict_round_trip():
    world = _world(image_noise=0.3)
    clone = SynthWorld.from_dict(world.to_dict())
    assert clone.cfg == world.cfg
    assert clone.class_tokens == world.class_tokens
    assert clone.sample_labels == world.sample_labels
    assert clone.embeddings == {}  # latent tables only
    with pytest.raises(MMGalleryError):
        clone.image_encoder()


def test_write_materializes_a_runnable_setup(tmp_path):
    world = _world(image_noise=0.2)
    paths = world.write(tmp_path)
    for key in ("manifest", "embeddings", "vocab", "world", "config"):
        assert paths[key].exists()

    manifest = load_manifest(paths["manifest"])
    assert len(manifest.records) == 4 * (3 + 2)

    encoder = PrecomputedEncoder.from_jsonl(paths["embeddings"])
    for sid in world.train_ids:
        stored = encoder.embed(sid)
        assert np.allclose(stored.values, world.embeddings[sid], atol=1e-6)

    vocab_lines = paths["vocab"].read_text(encoding="utf-8").splitlines()
    assert tuple(vocab_lines) == world.vocabulary

    reloaded = SynthWorld.load(paths["world"])
    assert reloaded.class_tokens == world.class_tokens

    file_config = load_config_file(paths["config"])
    cfg = ExperimentConfig(**file_config)
    assert cfg.shots == 3  # min(4, k_train)
    assert cfg.beta == 5.5
    assert cfg.image_encoder.backend_kind == "precomputed-file"
    assert cfg.image_encoder.endpoint_or_path == str(paths["embeddings"])
    assert cfg.chat_backend.backend_kind == "synthetic-mock"
    assert cfg.chat_backend.endpoint == str(paths["world"])
    assert cfg.cache_path == str(tmp_path / "descriptions.jsonl")
