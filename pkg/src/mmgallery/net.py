"""Small HTTP helper shared by the remote embedding and chat backends.

Retry policy: up to ``attempts`` tries on connection failures, timeouts, and
5xx responses, with exponential backoff starting at ``backoff`` seconds.
4xx responses are treated as permanent and fail immediately.
"""

from __future__ import annotations

import logging
import time
from typing import Any, Callable

import requests

from .errors import BackendUnavailable

logger = logging.getLogger(__name__)

DEFAULT_ATTEMPTS = 3
DEFAULT_BACKOFF = 0.25


def post_json(
    url: str,
    payload: dict[str, Any],
    *,
    attempts: int = DEFAULT_ATTEMPTS,
    backoff: float = DEFAULT_BACKOFF,
    timeout: float = 60.0,
    session: requests.Session | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> dict[str, Any]:
    """POST ``payload`` as JSON and return the decoded JSON response body."""
    post = (session or requests).post
    last_error = ""
    for attempt in range(attempts):
        if attempt:
            sleep(backoff * (2 ** (attempt - 1)))
        try:
            response = post(url, json=payload, timeout=timeout)
        except requests.RequestException as exc:
            last_error = str(exc)
            logger.debug("POST %s attempt %d failed: %s", url, attempt + 1, exc)
            continue
        if 400 <= response.status_code < 500:
            raise BackendUnavailable(
                f"{url} rejected the request ({response.status_code}): "
                f"{response.text[:200]}"
            )
        if response.status_code >= 500:
            last_error = f"HTTP {response.status_code}"
            logger.debug("POST %s attempt %d: %s", url, attempt + 1, last_error)
            continue
        try:
            return response.json()
        except ValueError as exc:
            raise BackendUnavailable(f"{url} returned non-JSON body: {exc}") from exc
    raise BackendUnavailable(
        f"{url} unreachable after {attempts} attempts (last error: {last_error})"
    )
