"""Layered run configuration: defaults < YAML file < environment < flags.

The YAML file supplies backend descriptors (encoders, chat model, fusion
weights) plus experiment defaults; ``MMGALLERY_*`` environment variables
and CLI flags override individual experiment knobs without touching the
file. Unknown keys anywhere are rejected so typos fail loudly.
"""

from __future__ import annotations

import os
from dataclasses import fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .captioner import ChatBackendDescriptor, PromptTemplates
from .encoders import EncoderDescriptor
from .errors import InvalidConfig
from .gallery import FusionConfig
from .harness import ExperimentConfig

ENV_PREFIX = "MMGALLERY_"

# env var suffix -> (ExperimentConfig field, parser)
_ENV_KNOBS: dict[str, tuple[str, Any]] = {
    "SEED": ("seed", int),
    "SHOTS": ("shots", int),
    "T": ("t", int),
    "S": ("s", int),
    "BETA": ("beta", float),
    "AGGREGATION": ("aggregation", str),
    "MODE": ("mode", str),
    "MAX_IN_FLIGHT": ("max_in_flight", int),
    "CACHE": ("cache_path", str),
    "LIMIT": ("limit", int),
}

_EXPERIMENT_KEYS = (
    "shots",
    "t",
    "s",
    "beta",
    "aggregation",
    "mode",
    "category_text",
    "representative",
    "max_in_flight",
    "limit",
)

_TOP_LEVEL_KEYS = (
    "seed",
    "cache",
    "image_encoder",
    "text_encoder",
    "chat_backend",
    "fusion",
    "templates",
    "experiment",
)


def _require_mapping(value: Any, where: str) -> Mapping[str, Any]:
    if not isinstance(value, Mapping):
        raise InvalidConfig(f"{where} must be a mapping, got {type(value).__name__}")
    return value


def _encoder_descriptor(data: Mapping[str, Any], where: str) -> EncoderDescriptor:
    try:
        return EncoderDescriptor(
            modality=str(data["modality"]),
            backend_kind=str(data["backend_kind"]),
            endpoint_or_path=str(data["endpoint_or_path"]),
            model_id=str(data["model_id"]),
            dim=int(data.get("dim", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidConfig(f"{where}: {exc}") from exc


def _chat_descriptor(data: Mapping[str, Any], where: str) -> ChatBackendDescriptor:
    try:
        return ChatBackendDescriptor(
            backend_kind=str(data["backend_kind"]),
            endpoint=str(data["endpoint"]),
            model_id=str(data["model_id"]),
            temperature=float(data.get("temperature", 0.0)),
            max_tokens=int(data.get("max_tokens", 512)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidConfig(f"{where}: {exc}") from exc


def load_config_file(path: str | Path) -> dict[str, Any]:
    """Parse the YAML file into keyword arguments for ExperimentConfig."""
    path = Path(path)
    if not path.exists():
        raise InvalidConfig(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise InvalidConfig(f"{path}: not valid YAML: {exc}") from exc
    if raw is None:
        return {}
    data = _require_mapping(raw, str(path))
    unknown = set(data) - set(_TOP_LEVEL_KEYS)
    if unknown:
        raise InvalidConfig(f"{path}: unknown keys {sorted(unknown)}")

    out: dict[str, Any] = {}
    if "seed" in data:
        out["seed"] = int(data["seed"])
    if "cache" in data and data["cache"] is not None:
        out["cache_path"] = str(data["cache"])
    if "image_encoder" in data:
        out["image_encoder"] = _encoder_descriptor(
            _require_mapping(data["image_encoder"], "image_encoder"),
            "image_encoder",
        )
    if "text_encoder" in data:
        out["text_encoder"] = _encoder_descriptor(
            _require_mapping(data["text_encoder"], "text_encoder"), "text_encoder"
        )
    if "chat_backend" in data:
        out["chat_backend"] = _chat_descriptor(
            _require_mapping(data["chat_backend"], "chat_backend"), "chat_backend"
        )
    if "fusion" in data:
        try:
            out["fusion"] = FusionConfig.from_dict(
                _require_mapping(data["fusion"], "fusion")
            )
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(f"fusion: {exc}") from exc
    if "templates" in data and data["templates"] is not None:
        out["templates"] = PromptTemplates.from_file(data["templates"])
    if "experiment" in data:
        experiment = _require_mapping(data["experiment"], "experiment")
        unknown = set(experiment) - set(_EXPERIMENT_KEYS)
        if unknown:
            raise InvalidConfig(f"experiment: unknown keys {sorted(unknown)}")
        out.update(experiment)
    return out


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    """Collect ``MMGALLERY_*`` experiment overrides from the environment."""
    environ = os.environ if environ is None else environ
    out: dict[str, Any] = {}
    for suffix, (field_name, parse) in _ENV_KNOBS.items():
        raw = environ.get(ENV_PREFIX + suffix)
        if raw is None:
            continue
        try:
            out[field_name] = parse(raw)
        except ValueError as exc:
            raise InvalidConfig(
                f"{ENV_PREFIX}{suffix}={raw!r} is not a valid "
                f"{parse.__name__}"
            ) from exc
    return out


def resolve_experiment(
    file_config: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
    **flags: Any,
) -> ExperimentConfig:
    """Merge the three layers; ``flags`` values of None mean "not given"."""
    merged: dict[str, Any] = {}
    merged.update(file_config or {})
    merged.update(env_overrides(environ))
    merged.update({k: v for k, v in flags.items() if v is not None})
    valid = {f.name for f in fields(ExperimentConfig)}
    unknown = set(merged) - valid
    if unknown:
        raise InvalidConfig(f"unknown experiment settings {sorted(unknown)}")
    try:
        return ExperimentConfig(**merged)
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from exc
