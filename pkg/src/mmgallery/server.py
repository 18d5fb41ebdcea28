"""Minimal HTTP service exposing classification and category insertion.

Built on the stdlib threading HTTP server: requests run concurrently, and
the service swaps in a grown gallery atomically, so an in-flight classify
sees either the old gallery or the new one, never a half-built mix.

Routes:
    GET  /health           liveness and gallery shape
    POST /classify         {"image": ref, "id"?, "superclass"?, "top_k"?}
    POST /insert_category  {"label": str, "records": [{"id", "image", ...}]}

Status codes: 400 malformed request, 404 unknown route, 409 conflicting
insert, 503 backend unreachable, 500 anything else.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Mapping

from .captioner import Captioner
from .encoders import Encoder
from .errors import (
    BackendUnavailable,
    ClassAlreadyPresent,
    DuplicateSampleId,
    MMGalleryError,
)
from .gallery import Gallery, insert_category
from .manifest import ManifestRecord
from .pipeline import QueryPipeline
from .retrieval import RetrievalConfig

logger = logging.getLogger(__name__)


class RequestError(MMGalleryError):
    """Client sent something the service cannot act on (HTTP 400)."""


class GalleryService:
    """Owns the live pipeline and serializes gallery growth."""

    def __init__(
        self,
        gallery: Gallery,
        image_encoder: Encoder,
        text_encoder: Encoder | None = None,
        captioner: Captioner | None = None,
        retrieval: RetrievalConfig | None = None,
        mode: str = "similar-ref",
        image_ref_resolver=None,
    ) -> None:
        self._image_encoder = image_encoder
        self._text_encoder = text_encoder
        self._captioner = captioner
        self._retrieval = retrieval or RetrievalConfig()
        self._mode = mode
        self._resolver = image_ref_resolver
        self._insert_lock = threading.Lock()
        self._pipeline = self._make_pipeline(gallery)

    def _make_pipeline(self, gallery: Gallery) -> QueryPipeline:
        kwargs: dict[str, Any] = {}
        if self._resolver is not None:
            kwargs["image_ref_resolver"] = self._resolver
        return QueryPipeline(
            gallery=gallery,
            image_encoder=self._image_encoder,
            text_encoder=self._text_encoder,
            captioner=self._captioner,
            retrieval=self._retrieval,
            mode=self._mode,
            t=int(gallery.metadata.pipeline.get("t", 4)),
            seed=gallery.metadata.seed,
            representative=str(
                gallery.metadata.pipeline.get("representative", "target")
            ),
            **kwargs,
        )

    @property
    def gallery(self) -> Gallery:
        return self._pipeline.gallery

    def health(self) -> dict[str, Any]:
        gallery = self.gallery
        return {
            "status": "ok",
            "classes": gallery.metadata.c,
            "entries": len(gallery),
        }

    def classify(self, body: Mapping[str, Any]) -> dict[str, Any]:
        image = body.get("image")
        if not isinstance(image, str) or not image:
            raise RequestError('classify needs an "image" reference string')
        sample_id = body.get("id")
        if sample_id is not None and not isinstance(sample_id, str):
            raise RequestError('"id" must be a string')
        top_k = body.get("top_k", 1)
        if not isinstance(top_k, int) or top_k < 1:
            raise RequestError('"top_k" must be a positive integer')
        pipeline = self._pipeline  # snapshot: one gallery serves this request
        superclass = body.get("superclass") or pipeline.gallery.metadata.pipeline.get(
            "superclass_default", "object"
        )
        if not isinstance(superclass, str):
            raise RequestError('"superclass" must be a string')
        result, description = pipeline.classify_ref(image, superclass, sample_id)
        return {
            "predicted": result.predicted,
            "margin": result.margin,
            "top": [
                {"label": label, "score": score}
                for label, score in result.top_classes(top_k)
            ],
            "description": (
                None
                if description is None
                else {
                    "regions": list(description.regions),
                    "attributes": list(description.region_attributes),
                    "summary": description.summary,
                }
            ),
        }

    def insert_category(self, body: Mapping[str, Any]) -> dict[str, Any]:
        label = body.get("label")
        if not isinstance(label, str) or not label:
            raise RequestError('insert_category needs a "label" string')
        raw_records = body.get("records")
        if not isinstance(raw_records, list) or not raw_records:
            raise RequestError('insert_category needs a non-empty "records" list')
        default_superclass = self.gallery.metadata.pipeline.get(
            "superclass_default", "object"
        )
        records = []
        for i, raw in enumerate(raw_records):
            if not isinstance(raw, Mapping):
                raise RequestError(f"records[{i}] must be an object")
            try:
                records.append(
                    ManifestRecord(
                        id=str(raw["id"]),
                        label=label,
                        superclass=str(raw.get("superclass", default_superclass)),
                        split="train",
                        image=raw.get("image"),
                        embedding_ref=raw.get("embedding_ref"),
                    )
                )
            except (KeyError, TypeError, ValueError, MMGalleryError) as exc:
                raise RequestError(f"records[{i}]: {exc}") from exc
        with self._insert_lock:
            grown = insert_category(
                self.gallery,
                records,
                self._image_encoder,
                self._text_encoder,
                self._captioner,
            )
            # swap is a single attribute assignment: concurrent classifies
            # keep using whichever pipeline they already grabbed
            self._pipeline = self._make_pipeline(grown)
        return {
            "inserted": label,
            "entries": len(records),
            "classes": list(grown.metadata.class_labels),
        }


_STATUS_BY_ERROR = (
    (RequestError, 400),
    (ClassAlreadyPresent, 409),
    (DuplicateSampleId, 409),
    (BackendUnavailable, 503),
)


class _Handler(BaseHTTPRequestHandler):
    server: "GalleryHTTPServer"

    def log_message(self, format: str, *args: Any) -> None:
        logger.debug("%s %s", self.address_string(), format % args)

    def _send(self, status: int, payload: Mapping[str, Any]) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _read_json(self) -> Mapping[str, Any]:
        try:
            length = int(self.headers.get("Content-Length", "0"))
        except ValueError as exc:
            raise RequestError("bad Content-Length header") from exc
        raw = self.rfile.read(length) if length else b""
        if not raw:
            raise RequestError("request body is empty")
        try:
            body = json.loads(raw)
        except ValueError as exc:
            raise RequestError(f"request body is not valid JSON: {exc}") from exc
        if not isinstance(body, Mapping):
            raise RequestError("request body must be a JSON object")
        return body

    def _dispatch(self, method: str) -> None:
        service = self.server.service
        try:
            if method == "GET" and self.path == "/health":
                self._send(200, service.health())
            elif method == "POST" and self.path == "/classify":
                self._send(200, service.classify(self._read_json()))
            elif method == "POST" and self.path == "/insert_category":
                self._send(200, service.insert_category(self._read_json()))
            else:
                self._send(404, {"error": f"no route {method} {self.path}"})
        except Exception as exc:  # every failure maps to a JSON status reply
            for error_type, status in _STATUS_BY_ERROR:
                if isinstance(exc, error_type):
                    break
            else:
                status = 500
                logger.exception("unhandled error serving %s %s", method, self.path)
            self._send(status, {"error": str(exc), "type": type(exc).__name__})

    def do_GET(self) -> None:  # noqa: N802 (stdlib handler naming)
        self._dispatch("GET")

    def do_POST(self) -> None:  # noqa: N802
        self._dispatch("POST")


class GalleryHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    # the BaseServer default of 5 drops connections under bursty load
    request_queue_size = 128

    def __init__(self, address: tuple[str, int], service: GalleryService) -> None:
        super().__init__(address, _Handler)
        self.service = service


def make_server(
    service: GalleryService, host: str = "127.0.0.1", port: int = 8080
) -> GalleryHTTPServer:
    """Bind and return the server; ``port=0`` picks a free port."""
    return GalleryHTTPServer((host, port), service)


def serve(
    service: GalleryService, host: str = "127.0.0.1", port: int = 8080
) -> None:
    """Run until interrupted."""
    server = make_server(service, host, port)
    host_, port_ = server.server_address[:2]
    logger.info("serving on http://%s:%s", host_, port_)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
