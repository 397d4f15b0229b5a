"""Chat-completion clients: a live HTTP client plus fixture replay and recording wrappers.

Every client exposes ``complete(messages, *, model, temperature) -> str``.

Replay fixtures are JSON files named ``<request digest>.json``::

    {"request": {"model": ..., "temperature": ..., "messages": [...]},
     "response": "<assistant text>"}

or ``{"request": ..., "error": "timeout"}`` to replay a failed call.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from pathlib import Path
from typing import Optional, Protocol, Sequence

import httpx

__all__ = [
    "ChatClient",
    "ClientError",
    "FixtureMissingError",
    "ChatCompletionClient",
    "ReplayClient",
    "RecordingClient",
    "request_digest",
    "API_KEY_ENV",
    "DEFAULT_ENDPOINT",
]

API_KEY_ENV = "DIFFAUDIT_API_KEY"
DEFAULT_ENDPOINT = "https://api.openai.com/v1/chat/completions"


class ClientError(RuntimeError):
    """A remote call failed in a way worth retrying."""


class FixtureMissingError(LookupError):
    """Replay mode found no recorded response for a request."""


class ChatClient(Protocol):
    def complete(self, messages: Sequence[dict], *, model: str, temperature: float) -> str: ...


def _request_doc(messages: Sequence[dict], model: str, temperature: float) -> dict:
    return {"model": model, "temperature": float(temperature), "messages": list(messages)}


def request_digest(messages: Sequence[dict], *, model: str, temperature: float) -> str:
    canonical = json.dumps(
        _request_doc(messages, model, temperature), sort_keys=True, separators=(",", ":"),
        ensure_ascii=False,
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ChatCompletionClient:
    """OpenAI-compatible ``/chat/completions`` client.

    The API key comes from ``$DIFFAUDIT_API_KEY`` (falling back to
    ``$OPENAI_API_KEY``) unless passed explicitly.
    """

    def __init__(
        self,
        endpoint: str = DEFAULT_ENDPOINT,
        *,
        api_key: Optional[str] = None,
        timeout: float = 60.0,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        key = api_key or os.environ.get(API_KEY_ENV) or os.environ.get("OPENAI_API_KEY")
        if not key:
            raise ValueError(f"no API key: set ${API_KEY_ENV}")
        self.endpoint = endpoint
        self._client = httpx.Client(
            timeout=timeout,
            headers={"Authorization": f"Bearer {key}", "Content-Type": "application/json"},
            transport=transport,
        )

    def complete(self, messages: Sequence[dict], *, model: str, temperature: float) -> str:
        try:
            r = self._client.post(self.endpoint, json=_request_doc(messages, model, temperature))
        except httpx.HTTPError as exc:
            raise ClientError(f"transport error: {exc}") from exc
        if r.status_code == 429 or r.status_code >= 500:
            raise ClientError(f"HTTP {r.status_code}")
        if r.status_code >= 400:
            raise ClientError(f"HTTP {r.status_code}: {r.text[:200]}")
        try:
            return r.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise ClientError(f"unexpected response schema: {r.text[:200]}") from None

    def close(self) -> None:
        self._client.close()


class ReplayClient:
    """Serve recorded responses; a missing fixture raises FixtureMissingError."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise FileNotFoundError(f"replay fixture directory {self.directory} does not exist")
        self.calls = 0

    def complete(self, messages: Sequence[dict], *, model: str, temperature: float) -> str:
        digest = request_digest(messages, model=model, temperature=temperature)
        path = self.directory / f"{digest}.json"
        self.calls += 1
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise FixtureMissingError(f"no replay fixture {path.name} (temperature {temperature})") from None
        if "error" in doc:
            raise ClientError(f"replayed failure: {doc['error']}")
        return doc["response"]


class RecordingClient:
    """Wrap a client and store every exchange as a replay fixture."""

    def __init__(self, inner: ChatClient, directory: str | Path):
        self.inner = inner
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def complete(self, messages: Sequence[dict], *, model: str, temperature: float) -> str:
        doc = {"request": _request_doc(messages, model, temperature)}
        try:
            doc["response"] = self.inner.complete(messages, model=model, temperature=temperature)
        except ClientError as exc:
            doc["error"] = str(exc)
            self._write(doc, messages, model, temperature)
            raise
        self._write(doc, messages, model, temperature)
        return doc["response"]

    def _write(self, doc, messages, model, temperature) -> None:
        digest = request_digest(messages, model=model, temperature=temperature)
        with self._lock:
            (self.directory / f"{digest}.json").write_text(
                json.dumps(doc, indent=1, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8"
            )
