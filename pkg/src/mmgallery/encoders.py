"""Embedding backends with a uniform contract.

Every vector leaving this module is unit L2-normalized, finite, and held in
double precision; accumulations (norms, dot products) always run in double
precision even when a vector originated from single-precision storage.

Four backend kinds share one interface:

* ``remote``            an HTTP embedding service
* ``precomputed-file``  vectors looked up from a JSONL table by content id
* ``synthetic-mock``    deterministic pseudo-random vectors keyed by
                        (model id, content hash)
* ``bag-of-tokens``     text vectors counting vocabulary tokens, for worlds
                        whose captions are token strings
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .errors import (
    BackendUnavailable,
    ContentUnresolvable,
    DimensionMismatch,
    EmptyText,
    InvalidVector,
    MMGalleryError,
    ZeroVector,
)
from .net import DEFAULT_ATTEMPTS, DEFAULT_BACKOFF, post_json

logger = logging.getLogger(__name__)

MODALITIES = ("image", "text")
BACKEND_KINDS = ("remote", "precomputed-file", "synthetic-mock", "bag-of-tokens")


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    """Immutable wrapper around a finite 1-D float64 array."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=np.float64).reshape(-1)
        if arr.size == 0:
            raise InvalidVector("vector must have at least one component")
        if not np.all(np.isfinite(arr)):
            raise InvalidVector("vector contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def tolist(self) -> list[float]:
        return [float(x) for x in self.values]


def normalize(values: Sequence[float] | np.ndarray | EmbeddingVector) -> EmbeddingVector:
    """Scale ``values`` to unit L2 norm.

    Raises:
        ZeroVector: if every component is zero.
        InvalidVector: if the vector is empty or non-finite.
    """
    if isinstance(values, EmbeddingVector):
        values = values.values
    vec = EmbeddingVector(np.asarray(values))
    # Pre-scale by the largest magnitude so squaring can neither underflow
    # (subnormal inputs) nor overflow (huge ones) while summing.
    scale = float(np.max(np.abs(vec.values)))
    if scale == 0.0:
        raise ZeroVector("cannot normalize a zero vector")
    scaled = vec.values / scale
    return EmbeddingVector(scaled / float(np.linalg.norm(scaled)))


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Dot product of two unit vectors, in double precision."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"cosine between dim {a.dim} and dim {b.dim}")
    return float(np.dot(a.values, b.values))


def encode_vector_b64(values: np.ndarray | Sequence[float]) -> str:
    """Serialize to base64 over little-endian 32-bit floats."""
    arr = np.asarray(values, dtype="<f4")
    return base64.b64encode(arr.tobytes()).decode("ascii")


def decode_vector_b64(blob: str, dim: int | None = None) -> np.ndarray:
    """Inverse of :func:`encode_vector_b64`; returns float64 values."""
    raw = base64.b64decode(blob.encode("ascii"))
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    if dim is not None and arr.shape[0] != dim:
        raise DimensionMismatch(f"decoded {arr.shape[0]} values, expected {dim}")
    return arr


@dataclass(frozen=True)
class EncoderDescriptor:
    """Declarative recipe for constructing an encoder backend.

    ``dim`` may be 0 only for ``bag-of-tokens``, where the vocabulary file
    determines the dimensionality at load time.
    """

    modality: str
    backend_kind: str
    endpoint_or_path: str
    model_id: str
    dim: int

    def __post_init__(self) -> None:
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.backend_kind not in BACKEND_KINDS:
            raise ValueError(f"unknown backend kind {self.backend_kind!r}")
        if self.dim <= 0 and self.backend_kind != "bag-of-tokens":
            raise ValueError("dim must be a positive integer")


class Encoder(Protocol):
    """Anything that maps a content reference to a unit vector."""

    modality: str
    encoder_id: str
    dim: int

    def embed(self, content: str) -> EmbeddingVector: ...


class MockEncoder:
    """Deterministic pseudo-random unit vectors keyed by (model id, content).

    Identical (model id, content) pairs always produce bit-identical vectors;
    distinct contents land on distinct directions with overwhelming
    probability, which the tests verify by brute force.
    """

    def __init__(self, modality: str, dim: int, model_id: str = "mock") -> None:
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}")
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.modality = modality
        self.dim = dim
        self.model_id = model_id
        self.encoder_id = f"mock:{model_id}:{modality}:{dim}"

    def embed(self, content: str) -> EmbeddingVector:
        if self.modality == "text" and not content.strip():
            raise EmptyText("cannot embed empty text")
        digest = hashlib.sha256(
            f"{self.model_id}\x00{content}".encode("utf-8")
        ).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:16], "big"))
        return normalize(rng.standard_normal(self.dim))


class PrecomputedEncoder:
    """Vectors looked up by content id from a table, normalized on output."""

    def __init__(
        self,
        table: Mapping[str, np.ndarray | Sequence[float]],
        *,
        modality: str = "image",
        dim: int | None = None,
        encoder_id: str = "precomputed",
    ) -> None:
        self.modality = modality
        self.encoder_id = encoder_id
        self._table: dict[str, np.ndarray] = {}
        for key, values in table.items():
            arr = np.asarray(values, dtype=np.float64).reshape(-1)
            if dim is None:
                dim = int(arr.shape[0])
            elif arr.shape[0] != dim:
                raise DimensionMismatch(
                    f"entry {key!r} has dim {arr.shape[0]}, expected {dim}"
                )
            self._table[key] = arr
        if dim is None:
            raise ValueError("precomputed table is empty and no dim was given")
        self.dim = dim

    @classmethod
    def from_jsonl(
        cls,
        path: str | Path,
        *,
        modality: str = "image",
        encoder_id: str | None = None,
    ) -> "PrecomputedEncoder":
        """Load ``{"id","embedding","dim"}`` records with base64 f32 payloads."""
        table: dict[str, np.ndarray] = {}
        with open(path, "r", encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    values = decode_vector_b64(
                        record["embedding"], record.get("dim")
                    )
                    table[record["id"]] = values
                except (KeyError, ValueError, TypeError) as exc:
                    raise MMGalleryError(
                        f"{path}: bad embedding record at line {lineno}: {exc}"
                    ) from exc
        return cls(
            table,
            modality=modality,
            encoder_id=encoder_id or f"precomputed:{Path(path).name}",
        )

    def embed(self, content: str) -> EmbeddingVector:
        if content not in self._table:
            raise ContentUnresolvable(f"no precomputed embedding for {content!r}")
        return normalize(self._table[content])


class BagOfTokensEncoder:
    """Text vectors counting whitespace-separated vocabulary tokens.

    Tokens outside the vocabulary are ignored; a text with no in-vocabulary
    tokens has no direction and raises :class:`ZeroVector`.
    """

    modality = "text"

    def __init__(self, vocabulary: Sequence[str], *, encoder_id: str = "bag") -> None:
        self._index = {token: i for i, token in enumerate(vocabulary)}
        if not self._index:
            raise ValueError("vocabulary must not be empty")
        self.dim = len(self._index)
        self.encoder_id = f"{encoder_id}:{self.dim}"

    @classmethod
    def from_vocab_file(cls, path: str | Path, **kwargs) -> "BagOfTokensEncoder":
        tokens = [
            line.strip()
            for line in Path(path).read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        return cls(tokens, **kwargs)

    def embed(self, content: str) -> EmbeddingVector:
        if not content.strip():
            raise EmptyText("cannot embed empty text")
        counts = np.zeros(self.dim, dtype=np.float64)
        for token in content.split():
            slot = self._index.get(token)
            if slot is not None:
                counts[slot] += 1.0
        return normalize(counts)


class RemoteEncoder:
    """Client for an HTTP embedding service.

    Wire protocol: ``POST {"model": str, "input": [str-or-base64-image, ...]}``
    answered with ``{"data": [{"index": int, "embedding": [float, ...]}]}``;
    results are restored to input order via the ``index`` field.
    """

    def __init__(
        self,
        descriptor: EncoderDescriptor,
        *,
        attempts: int = DEFAULT_ATTEMPTS,
        backoff: float = DEFAULT_BACKOFF,
        timeout: float = 60.0,
    ) -> None:
        self.modality = descriptor.modality
        self.dim = descriptor.dim
        self.model_id = descriptor.model_id
        self.endpoint = descriptor.endpoint_or_path
        self.encoder_id = f"remote:{descriptor.model_id}"
        self._attempts = attempts
        self._backoff = backoff
        self._timeout = timeout

    def _resolve(self, content: str) -> str:
        if self.modality == "text":
            if not content.strip():
                raise EmptyText("cannot embed empty text")
            return content
        if content.startswith(("http://", "https://", "data:")):
            return content
        path = Path(content)
        if path.is_file():
            return base64.b64encode(path.read_bytes()).decode("ascii")
        return content

    def embed_batch(self, contents: Sequence[str]) -> list[EmbeddingVector]:
        """Embed several items in one request, restoring input order by index."""
        payload = {
            "model": self.model_id,
            "input": [self._resolve(content) for content in contents],
        }
        body = post_json(
            self.endpoint,
            payload,
            attempts=self._attempts,
            backoff=self._backoff,
            timeout=self._timeout,
        )
        try:
            rows = sorted(body["data"], key=lambda row: row["index"])
            batches = [
                np.asarray(row["embedding"], dtype=np.float64) for row in rows
            ]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable(
                f"{self.endpoint} returned a malformed embedding response: {exc}"
            ) from exc
        if len(batches) != len(contents):
            raise BackendUnavailable(
                f"{self.endpoint} returned {len(batches)} embeddings for "
                f"{len(contents)} inputs"
            )
        out = []
        for values in batches:
            if values.shape[0] != self.dim:
                raise DimensionMismatch(
                    f"{self.encoder_id} returned dim {values.shape[0]}, "
                    f"descriptor says {self.dim}"
                )
            out.append(normalize(values))
        return out

    def embed(self, content: str) -> EmbeddingVector:
        return self.embed_batch([content])[0]


def make_encoder(descriptor: EncoderDescriptor, **kwargs) -> Encoder:
    """Construct the backend named by ``descriptor``."""
    kind = descriptor.backend_kind
    if kind == "remote":
        return RemoteEncoder(descriptor, **kwargs)
    if kind == "precomputed-file":
        return PrecomputedEncoder.from_jsonl(
            descriptor.endpoint_or_path,
            modality=descriptor.modality,
            encoder_id=f"precomputed:{descriptor.model_id}",
        )
    if kind == "synthetic-mock":
        return MockEncoder(descriptor.modality, descriptor.dim, descriptor.model_id)
    if kind == "bag-of-tokens":
        if descriptor.modality != "text":
            raise ValueError("bag-of-tokens encoders are text-only")
        return BagOfTokensEncoder.from_vocab_file(
            descriptor.endpoint_or_path, encoder_id=f"bag:{descriptor.model_id}"
        )
    raise ValueError(f"unknown backend kind {kind!r}")


def _checked(vector: EmbeddingVector, encoder: Encoder) -> EmbeddingVector:
    if vector.dim != encoder.dim:
        raise DimensionMismatch(
            f"{encoder.encoder_id} produced dim {vector.dim}, expected {encoder.dim}"
        )
    return vector


def embed_image(image_ref: str, encoder: Encoder) -> EmbeddingVector:
    """Embed one image reference with an image-modality encoder."""
    if encoder.modality != "image":
        raise ValueError(f"{encoder.encoder_id} is not an image encoder")
    return _checked(encoder.embed(image_ref), encoder)


def embed_text(text: str, encoder: Encoder) -> EmbeddingVector:
    """Embed one text with a text-modality encoder."""
    if encoder.modality != "text":
        raise ValueError(f"{encoder.encoder_id} is not a text encoder")
    if not text.strip():
        raise EmptyText("cannot embed empty text")
    return _checked(encoder.embed(text), encoder)


def batch_embed(
    items: Iterable[str],
    encoder: Encoder,
    max_in_flight: int = 4,
) -> list[EmbeddingVector]:
    """Embed many items, at most ``max_in_flight`` backend calls in flight.

    Output order matches input order and each element equals the
    single-call result. The first failing item aborts the batch; the raised
    error names the item's position and reference.
    """
    if max_in_flight < 1:
        raise ValueError("max_in_flight must be at least 1")
    contents = list(items)
    if not contents:
        return []
    batch = getattr(encoder, "embed_batch", None)
    if batch is not None and len(contents) > 1:
        try:
            return [_checked(v, encoder) for v in batch(contents)]
        except MMGalleryError as exc:
            raise type(exc)(f"batch of {len(contents)} items: {exc}") from exc
    if max_in_flight == 1 or len(contents) == 1:
        results = []
        for i, content in enumerate(contents):
            try:
                results.append(_checked(encoder.embed(content), encoder))
            except MMGalleryError as exc:
                raise type(exc)(f"batch item {i} ({content!r}): {exc}") from exc
        return results
    with ThreadPoolExecutor(max_workers=min(max_in_flight, len(contents))) as pool:
        futures = [pool.submit(encoder.embed, content) for content in contents]
        results = []
        for i, (content, future) in enumerate(zip(contents, futures)):
            try:
                results.append(_checked(future.result(), encoder))
            except MMGalleryError as exc:
                raise type(exc)(f"batch item {i} ({content!r}): {exc}") from exc
    return results
