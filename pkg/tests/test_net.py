"""Retry and error policy of the shared HTTP POST helper."""

from __future__ import annotations

import pytest
import requests

from mmgallery.errors import BackendUnavailable
from mmgallery.net import post_json


class StubResponse:
    def __init__(self, status_code=200, body=None, text=""):
        self.status_code = status_code
        self._body = body
        self.text = text

    def json(self):
        if self._body is None:
            raise ValueError("not json")
        return self._body


class StubSession:
    """Plays back a script of responses/exceptions and records calls."""

    def __init__(self, script):
        self.script = list(script)
        self.calls = []

    def post(self, url, json=None, timeout=None):
        self.calls.append({"url": url, "json": json, "timeout": timeout})
        item = self.script.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


def test_success_first_try_no_sleep():
    session = StubSession([StubResponse(body={"ok": 1})])
    sleeps = []
    body = post_json(
        "http://svc/x", {"a": 1}, session=session, sleep=sleeps.append
    )
    assert body == {"ok": 1}
    assert len(session.calls) == 1
    assert session.calls[0]["json"] == {"a": 1}
    assert sleeps == []


def test_retries_connection_errors_with_exponential_backoff():
    session = StubSession(
        [
            requests.ConnectionError("down"),
            requests.ConnectionError("down"),
            StubResponse(body={"ok": 2}),
        ]
    )
    sleeps = []
    body = post_json(
        "http://svc/x", {}, session=session, backoff=0.25, sleep=sleeps.append
    )
    assert body == {"ok": 2}
    assert len(session.calls) == 3
    assert sleeps == [0.25, 0.5]


def test_retries_5xx_then_gives_up():
    session = StubSession([StubResponse(500), StubResponse(502), StubResponse(503)])
    sleeps = []
    with pytest.raises(BackendUnavailable) as err:
        post_json("http://svc/x", {}, session=session, sleep=sleeps.append)
    assert "3 attempts" in str(err.value)
    assert len(session.calls) == 3
    assert sleeps == [0.25, 0.5]


def test_4xx_fails_immediately_without_retry():
    session = StubSession([StubResponse(404, text="nope")])
    with pytest.raises(BackendUnavailable) as err:
        post_json("http://svc/x", {}, session=session, sleep=lambda s: None)
    assert "404" in str(err.value)
    assert len(session.calls) == 1


def test_non_json_200_raises():
    session = StubSession([StubResponse(200, body=None, text="<html>")])
    with pytest.raises(BackendUnavailable) as err:
        post_json("http://svc/x", {}, session=session, sleep=lambda s: None)
    assert "non-JSON" in str(err.value)


def test_custom_attempts():
    session = StubSession([requests.Timeout("slow")] * 5)
    with pytest.raises(BackendUnavailable):
        post_json(
            "http://svc/x", {}, session=session, attempts=5, sleep=lambda s: None
        )
    assert len(session.calls) == 5
