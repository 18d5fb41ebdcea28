"""Chain-of-thought captioning against a multimodal chat backend.

Structured descriptions are produced in three stages, each a single chat
call: discover the discriminative visual regions of the target (with the
reference images attached for contrast), describe each region's visual
attributes, and summarize the collected attributes while re-attaching the
target image so the summary stays grounded in it. One caption therefore
costs ``s + 2`` backend calls on a cache miss and none on a hit.

Image placeholders (``{IMAGERY}``, ``{IMAGE}``) mark where attachments
belong; they are stripped from the prompt text and the images ride along as
``image_url`` content parts, references first and the target always last.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, Sequence

from .errors import (
    BackendUnavailable,
    CacheInvalid,
    EmptyResponse,
    ParseFailure,
    RegionCountMismatch,
    TemplateError,
)
from .net import DEFAULT_ATTEMPTS, DEFAULT_BACKOFF, post_json

logger = logging.getLogger(__name__)

MAX_REGION_WORDS = 10

DEFAULT_DISCOVER = (
    "{IMAGERY} We provide {t} images from different categories within the "
    "{SUPERCLASS} that share similar visual features, and use them as "
    "references to generate {s} discriminative visual regions for "
    "distinguishing the target image's category."
)
DEFAULT_DESCRIBE = (
    "{IMAGE} Describe the visual attributes of the {REGION} in the "
    "{SUPERCLASS} category."
)
DEFAULT_SUMMARIZE = (
    "{IMAGE} Summarize the information you get about the {SUPERCLASS} from "
    "the attribute description.\nRegions: {REGIONS}\nAttributes: {ATTRIBUTES}"
)
DEFAULT_NAIVE = "{IMAGE} Describe this {SUPERCLASS} image."
DEFAULT_AGGREGATE = (
    "Combine the following descriptions of one {SUPERCLASS} category into a "
    "single unified description of its shared characteristics.\n"
    "Descriptions: {SUMMARIES}"
)

_PLACEHOLDER = re.compile(
    r"\{(IMAGERY|IMAGE|SUPERCLASS|REGION|REGIONS|ATTRIBUTES|SUMMARIES|t|s)\}"
)
_IMAGE_MARKERS = ("IMAGERY", "IMAGE")
_SECTION = re.compile(r"^\[([a-z_]+)\]\s*$")


def render(template: str, bindings: dict[str, Any]) -> str:
    """Substitute placeholders; image markers are dropped from the text.

    Raises:
        TemplateError: if a non-image placeholder has no binding.
    """

    def substitute(match: re.Match) -> str:
        name = match.group(1)
        if name in _IMAGE_MARKERS:
            return ""
        if name not in bindings:
            raise TemplateError(f"placeholder {{{name}}} has no binding")
        return str(bindings[name])

    return _PLACEHOLDER.sub(substitute, template).strip()


@dataclass(frozen=True)
class PromptTemplates:
    """The prompt set driving the captioner, loadable from a sectioned file."""

    discover: str = DEFAULT_DISCOVER
    describe: str = DEFAULT_DESCRIBE
    summarize: str = DEFAULT_SUMMARIZE
    naive: str = DEFAULT_NAIVE
    aggregate: str = DEFAULT_AGGREGATE

    def template_hash(self) -> str:
        payload = "\x1e".join(
            (self.discover, self.describe, self.summarize, self.naive, self.aggregate)
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_file(cls, path: str | Path) -> "PromptTemplates":
        """Parse ``[discover]`` / ``[describe]`` / ... sections from a text file."""
        sections: dict[str, list[str]] = {}
        current: list[str] | None = None
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            match = _SECTION.match(line.strip())
            if match:
                current = sections.setdefault(match.group(1), [])
                continue
            if current is not None:
                current.append(line)
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(sections) - known
        if unknown:
            raise TemplateError(f"{path}: unknown template sections {sorted(unknown)}")
        overrides = {
            name: "\n".join(lines).strip()
            for name, lines in sections.items()
            if "\n".join(lines).strip()
        }
        return cls(**overrides)


def resolve_image_url(ref: str) -> str:
    """Turn a content reference into a message attachment URL.

    Existing files become base64 data URIs; http/data URLs pass through;
    anything else is treated as an opaque id the backend knows how to
    resolve (the synthetic backends work this way).
    """
    if ref.startswith(("http://", "https://", "data:")):
        return ref
    path = Path(ref)
    if path.is_file():
        mime = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
        blob = base64.b64encode(path.read_bytes()).decode("ascii")
        return f"data:{mime};base64,{blob}"
    return ref


def build_message(text: str, image_refs: Sequence[str] = ()) -> dict[str, Any]:
    """One user message: a text part followed by image attachments in order."""
    content: list[dict[str, Any]] = [{"type": "text", "text": text}]
    for ref in image_refs:
        content.append(
            {"type": "image_url", "image_url": {"url": resolve_image_url(ref)}}
        )
    return {"role": "user", "content": content}


# --- chat backends ----------------------------------------------------------


@dataclass(frozen=True)
class ChatBackendDescriptor:
    """Declarative recipe for a multimodal chat backend."""

    backend_kind: str
    endpoint: str
    model_id: str
    temperature: float = 0.0
    max_tokens: int = 512

    def __post_init__(self) -> None:
        if self.backend_kind not in ("remote", "synthetic-mock"):
            raise ValueError(f"unknown chat backend kind {self.backend_kind!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


class ChatBackend(Protocol):
    """Anything that answers a list of chat messages with text."""

    backend_id: str

    def complete(self, messages: list[dict[str, Any]]) -> str: ...


class RemoteChatBackend:
    """Client for an HTTP chat service.

    Wire protocol: ``POST {"model", "temperature", "max_tokens", "messages"}``
    where messages carry text and ``image_url`` content parts; the response
    text is read from the first choice's message content.
    """

    def __init__(
        self,
        descriptor: ChatBackendDescriptor,
        *,
        attempts: int = DEFAULT_ATTEMPTS,
        backoff: float = DEFAULT_BACKOFF,
        timeout: float = 120.0,
    ) -> None:
        self.descriptor = descriptor
        self.backend_id = f"remote:{descriptor.model_id}:T{descriptor.temperature}"
        self._attempts = attempts
        self._backoff = backoff
        self._timeout = timeout

    def complete(self, messages: list[dict[str, Any]]) -> str:
        payload = {
            "model": self.descriptor.model_id,
            "temperature": self.descriptor.temperature,
            "max_tokens": self.descriptor.max_tokens,
            "messages": messages,
        }
        body = post_json(
            self.descriptor.endpoint,
            payload,
            attempts=self._attempts,
            backoff=self._backoff,
            timeout=self._timeout,
        )
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable(
                f"{self.descriptor.endpoint} returned a malformed chat "
                f"response: {exc}"
            ) from exc
        if isinstance(content, list):
            content = "".join(
                part.get("text", "") for part in content if isinstance(part, dict)
            )
        return content if isinstance(content, str) else ""


def make_chat_backend(descriptor: ChatBackendDescriptor, **kwargs) -> ChatBackend:
    """Construct the chat backend named by ``descriptor``."""
    if descriptor.backend_kind == "remote":
        return RemoteChatBackend(descriptor, **kwargs)
    from .synth import SynthChatBackend, SynthWorld

    world = SynthWorld.load(descriptor.endpoint)
    return SynthChatBackend(world)


# --- response parsing -------------------------------------------------------

_BULLET = re.compile(r"^\s*(?:\d+\s*[.):]|[-*•])\s*(.+)$")
_INLINE_NUMBER = re.compile(r"\s*\d+\s*[.)]\s*")


def parse_region_list(text: str) -> list[str]:
    """Extract list items from numbered, bulleted, or separator-joined text.

    Raises:
        ParseFailure: if no items can be recovered.
    """
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if not lines:
        raise ParseFailure("response is empty")
    bullet_items = []
    for line in lines:
        match = _BULLET.match(line)
        if match:
            bullet_items.append(match.group(1))
    if len(lines) == 1:
        line = lines[0]
        inline = [p for p in _INLINE_NUMBER.split(line) if p.strip()]
        if len(inline) > 1:
            items = inline
        elif bullet_items:
            items = bullet_items
        elif ";" in line:
            items = line.split(";")
        elif "," in line:
            items = line.split(",")
        else:
            items = [line]
    elif len(bullet_items) == len(lines):
        items = bullet_items
    else:
        items = lines
    cleaned = [item.strip().strip(".,;:").strip() for item in items]
    cleaned = [item for item in cleaned if item]
    if not cleaned:
        raise ParseFailure(f"no list items found in response: {text[:120]!r}")
    return cleaned


# --- structured descriptions ------------------------------------------------


@dataclass(frozen=True)
class StructuredDescription:
    """Regions, their attribute texts, and the grounded summary for one image."""

    sample_id: str
    superclass: str
    regions: tuple[str, ...]
    region_attributes: tuple[str, ...]
    summary: str
    backend_id: str

    def __post_init__(self) -> None:
        if len(self.regions) != len(self.region_attributes):
            raise ValueError("regions and region_attributes must align")
        for name in self.regions:
            if not name.strip():
                raise ValueError("region names must be non-empty")
            if len(name.split()) > MAX_REGION_WORDS:
                raise ValueError(f"region name too long: {name!r}")
        if not self.summary.strip():
            raise ValueError("summary must be non-empty")


def description_key(
    sample_id: str,
    backend_id: str,
    template_hash: str,
    s: int,
    reference_ids: Sequence[str],
    kind: str = "structured",
) -> str:
    """Content hash identifying one caption's full input recipe."""
    payload = json.dumps(
        {
            "sample_id": sample_id,
            "backend_id": backend_id,
            "template_hash": template_hash,
            "s": s,
            "reference_ids": list(reference_ids),
            "kind": kind,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class DescriptionCache:
    """Append-only JSONL cache of structured descriptions, keyed by recipe hash.

    Thread-safe: concurrent writers serialize on a lock. Records are never
    rewritten; a re-run with identical inputs touches the backend zero times.
    """

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self._records: dict[str, dict[str, Any]] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        assert self.path is not None
        with open(self.path, "r", encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    record["key"]
                    record["sample_id"]
                except (ValueError, TypeError, KeyError) as exc:
                    raise CacheInvalid(
                        f"{self.path}: bad cache record at line {lineno}: {exc}"
                    ) from exc
                self._records[record["key"]] = record

    def __len__(self) -> int:
        return len(self._records)

    def get(self, key: str) -> StructuredDescription | None:
        with self._lock:
            record = self._records.get(key)
        if record is None:
            self.misses += 1
            return None
        self.hits += 1
        return StructuredDescription(
            sample_id=record["sample_id"],
            superclass=record["superclass"],
            regions=tuple(record["regions"]),
            region_attributes=tuple(record["attributes"]),
            summary=record["summary"],
            backend_id=record["backend_id"],
        )

    def put(
        self, key: str, description: StructuredDescription, template_hash: str
    ) -> None:
        record = {
            "key": key,
            "sample_id": description.sample_id,
            "superclass": description.superclass,
            "regions": list(description.regions),
            "attributes": list(description.region_attributes),
            "summary": description.summary,
            "backend_id": description.backend_id,
            "template_hash": template_hash,
        }
        with self._lock:
            if key in self._records:
                return
            self._records[key] = record
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as handle:
                    handle.write(json.dumps(record, sort_keys=True) + "\n")

    @property
    def stats(self) -> dict[str, int]:
        return {"hits": self.hits, "misses": self.misses, "size": len(self._records)}


# --- captioning stages ------------------------------------------------------


def discover_regions(
    target_ref: str,
    reference_refs: Sequence[str],
    superclass: str,
    s: int,
    backend: ChatBackend,
    templates: PromptTemplates,
) -> list[str]:
    """Stage one: name exactly ``s`` discriminative visual regions.

    A malformed or miscounted response earns one stricter reprompt before
    failing.
    """
    if s < 1:
        raise ValueError("s must be at least 1")
    text = render(
        templates.discover,
        {"t": len(reference_refs), "s": s, "SUPERCLASS": superclass},
    )
    refs = [*reference_refs, target_ref]

    def attempt(prompt: str) -> list[str]:
        response = backend.complete([build_message(prompt, refs)])
        return parse_region_list(response)

    try:
        regions = attempt(text)
        if len(regions) == s:
            return regions
        first_error: Exception = RegionCountMismatch(
            f"expected {s} regions, parsed {len(regions)}"
        )
    except ParseFailure as exc:
        first_error = exc
    strict = (
        f"{text}\nRespond with exactly {s} region names as a numbered list, "
        "one per line, with no additional text."
    )
    try:
        regions = attempt(strict)
    except ParseFailure as exc:
        raise exc from first_error
    if len(regions) != s:
        raise RegionCountMismatch(
            f"expected {s} regions, parsed {len(regions)} after reprompt"
        )
    return regions


def describe_region(
    target_ref: str,
    superclass: str,
    region_name: str,
    backend: ChatBackend,
    templates: PromptTemplates,
) -> str:
    """Stage two: describe one region's visual attributes on the target."""
    text = render(
        templates.describe, {"REGION": region_name, "SUPERCLASS": superclass}
    )
    response = backend.complete([build_message(text, [target_ref])]).strip()
    if not response:
        raise EmptyResponse(f"empty attribute description for {region_name!r}")
    return response


def summarize(
    target_ref: str,
    superclass: str,
    regions: Sequence[str],
    attributes: Sequence[str],
    backend: ChatBackend,
    templates: PromptTemplates,
) -> str:
    """Stage three: fold the attributes into one summary, image re-attached."""
    if len(regions) != len(attributes):
        raise ValueError("regions and attributes must align")
    text = render(
        templates.summarize,
        {
            "SUPERCLASS": superclass,
            "REGIONS": "; ".join(regions),
            "ATTRIBUTES": "; ".join(attributes),
        },
    )
    response = backend.complete([build_message(text, [target_ref])]).strip()
    if not response:
        raise EmptyResponse("empty summary")
    return response


def caption(
    target_ref: str,
    reference_refs: Sequence[str],
    superclass: str,
    s: int,
    backend: ChatBackend,
    templates: PromptTemplates,
    cache: DescriptionCache | None = None,
    *,
    sample_id: str | None = None,
    reference_ids: Sequence[str] | None = None,
) -> StructuredDescription:
    """Full three-stage caption: ``s + 2`` backend calls on a cache miss."""
    sample_id = sample_id if sample_id is not None else target_ref
    reference_ids = (
        list(reference_ids) if reference_ids is not None else list(reference_refs)
    )
    key = description_key(
        sample_id, backend.backend_id, templates.template_hash(), s, reference_ids
    )
    if cache is not None:
        cached = cache.get(key)
        if cached is not None:
            return cached
    regions = discover_regions(
        target_ref, reference_refs, superclass, s, backend, templates
    )
    attributes = [
        describe_region(target_ref, superclass, region, backend, templates)
        for region in regions
    ]
    summary = summarize(
        target_ref, superclass, regions, attributes, backend, templates
    )
    description = StructuredDescription(
        sample_id=sample_id,
        superclass=superclass,
        regions=tuple(regions),
        region_attributes=tuple(attributes),
        summary=summary,
        backend_id=backend.backend_id,
    )
    if cache is not None:
        cache.put(key, description, templates.template_hash())
    return description


def naive_caption(
    target_ref: str,
    superclass: str,
    backend: ChatBackend,
    templates: PromptTemplates,
    cache: DescriptionCache | None = None,
    *,
    sample_id: str | None = None,
) -> StructuredDescription:
    """Single-prompt caption with no regions or references: one backend call."""
    sample_id = sample_id if sample_id is not None else target_ref
    key = description_key(
        sample_id, backend.backend_id, templates.template_hash(), 0, (), kind="naive"
    )
    if cache is not None:
        cached = cache.get(key)
        if cached is not None:
            return cached
    text = render(templates.naive, {"SUPERCLASS": superclass})
    response = backend.complete([build_message(text, [target_ref])]).strip()
    if not response:
        raise EmptyResponse("empty naive caption")
    description = StructuredDescription(
        sample_id=sample_id,
        superclass=superclass,
        regions=(),
        region_attributes=(),
        summary=response,
        backend_id=backend.backend_id,
    )
    if cache is not None:
        cache.put(key, description, templates.template_hash())
    return description


def aggregate_category_text(
    summaries: Sequence[str],
    superclass: str,
    backend: ChatBackend,
    templates: PromptTemplates,
) -> str:
    """Fold the per-sample summaries of one class into a single text.

    A single summary is returned as-is without touching the backend.
    """
    if not summaries:
        raise ValueError("at least one summary is required")
    if len(summaries) == 1:
        return summaries[0]
    text = render(
        templates.aggregate,
        {
            "SUPERCLASS": superclass,
            "SUMMARIES": "\n".join(f"- {s}" for s in summaries),
        },
    )
    response = backend.complete([build_message(text)]).strip()
    if not response:
        raise EmptyResponse("empty aggregated description")
    return response


# --- bound captioners used by the pipeline ----------------------------------


@dataclass
class Captioner:
    """Three-stage captioner bound to a backend, template set, and cache."""

    backend: ChatBackend
    templates: PromptTemplates = field(default_factory=PromptTemplates)
    s: int = 3
    cache: DescriptionCache | None = None
    kind: str = "structured"

    def caption(
        self,
        target_ref: str,
        superclass: str,
        reference_refs: Sequence[str] = (),
        *,
        sample_id: str | None = None,
        reference_ids: Sequence[str] | None = None,
    ) -> StructuredDescription:
        return caption(
            target_ref,
            reference_refs,
            superclass,
            self.s,
            self.backend,
            self.templates,
            self.cache,
            sample_id=sample_id,
            reference_ids=reference_ids,
        )


@dataclass
class NaiveCaptioner:
    """Single-prompt captioner; reference images are ignored."""

    backend: ChatBackend
    templates: PromptTemplates = field(default_factory=PromptTemplates)
    cache: DescriptionCache | None = None
    kind: str = "naive"
    s: int = 0

    def caption(
        self,
        target_ref: str,
        superclass: str,
        reference_refs: Sequence[str] = (),
        *,
        sample_id: str | None = None,
        reference_ids: Sequence[str] | None = None,
    ) -> StructuredDescription:
        return naive_caption(
            target_ref,
            superclass,
            self.backend,
            self.templates,
            self.cache,
            sample_id=sample_id,
        )
