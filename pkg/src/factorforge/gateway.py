"""Uniform client for chat-completion and text-embedding backends.

The gateway exists so that every LLM interaction in the system flows through
one chokepoint with three modes:

- ``live``: call the configured backend, return its answer.
- ``record``: call the backend, but persist ``digest -> response`` to a
  JSON-lines transcript first; a digest already present is served from the
  transcript, which makes recording idempotent.
- ``replay``: serve exclusively from the transcript; a missing digest is a
  hard error, never a silent live call.

Requests are keyed by a canonical content digest, so replay is stable across
process restarts, field ordering, and machines.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, Sequence

TRANSCRIPT_MODES = ("live", "record", "replay")

ROLES = ("system", "user", "assistant")


class GatewayError(Exception):
    """Base class for gateway faults."""


class BackendUnreachableError(GatewayError):
    """The backend could not be reached (after retries) or none is configured."""


class RateLimitedError(GatewayError):
    """The backend kept rate-limiting past the retry budget."""


class ReplayMissError(GatewayError):
    """A replay-mode lookup found no entry for the request digest."""

    def __init__(self, digest: str, kind: str):
        super().__init__(f"replay miss for {kind} request digest {digest}")
        self.digest = digest
        self.kind = kind


class MockExhaustedError(GatewayError):
    """The mock backend had no rule and no fallback response left."""


@dataclass(frozen=True)
class ChatRequest:
    """An ordered chat conversation to complete."""

    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    model_tag: str = "default"

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("chat request needs at least one message")
        for role, _content in self.messages:
            if role not in ROLES:
                raise ValueError(f"unknown message role {role!r}")
        if self.messages[0][0] not in ("system", "user"):
            raise ValueError("first message role must be system or user")
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")

    @property
    def text(self) -> str:
        """All message contents joined; what pattern-matching mocks see."""
        return "\n".join(content for _role, content in self.messages)


@dataclass(frozen=True)
class Embedding:
    """A unit-length embedding vector.

    Vectors are L2-normalized at ingestion, so cosine similarity between any
    two embeddings reduces to a plain dot product.
    """

    vector: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.vector:
            raise ValueError("embedding vector must be nonempty")
        norm = math.sqrt(sum(v * v for v in self.vector))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"embedding must be unit-norm, got |v| = {norm!r}")

    @property
    def dimension(self) -> int:
        return len(self.vector)

    @classmethod
    def normalized(cls, values: Sequence[float]) -> "Embedding":
        norm = math.sqrt(sum(v * v for v in values))
        if norm == 0.0:
            raise ValueError("cannot normalize an all-zero vector")
        return cls(tuple(v / norm for v in values))


def cosine_similarity(a: Embedding, b: Embedding) -> float:
    """Dot product of two unit vectors; defined for equal dimensions."""
    if a.dimension != b.dimension:
        raise ValueError("embedding dimensions differ")
    return sum(x * y for x, y in zip(a.vector, b.vector))


def canonical_digest(request: "ChatRequest | str") -> str:
    """Stable content hash of a chat request or an embedding input text.

    The digest is a sha256 over a canonical JSON serialization (sorted keys,
    compact separators), so it is invariant to field ordering and formatting
    of any outer representation.
    """
    if isinstance(request, ChatRequest):
        payload: dict[str, Any] = {
            "kind": "chat",
            "messages": [[role, content] for role, content in request.messages],
            "model_tag": request.model_tag,
            "temperature": request.temperature,
        }
    elif isinstance(request, str):
        payload = {"kind": "embed", "text": request}
    else:
        raise TypeError(f"cannot digest {type(request).__name__}")
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class Transcript:
    """Record/replay store: ``digest -> response`` backed by a JSONL file.

    File format: one ``{"digest": ..., "kind": "chat"|"embed", "response": ...}``
    object per line, append-only. Chat responses are strings; embed responses
    are number arrays (already unit-normalized).
    """

    def __init__(self, mode: str = "live", path: str | Path | None = None):
        if mode not in TRANSCRIPT_MODES:
            raise ValueError(f"unknown transcript mode {mode!r}")
        self.mode = mode
        self.path = Path(path) if path is not None else None
        self.entries: dict[str, Any] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load(self.path)

    def _load(self, path: Path) -> None:
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    self.entries[str(obj["digest"])] = obj["response"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise GatewayError(f"malformed transcript line {lineno} in {path}") from exc

    def lookup(self, digest: str, kind: str) -> Any:
        """Return the stored response, or raise in replay mode on a miss."""
        with self._lock:
            if digest in self.entries:
                return self.entries[digest]
        if self.mode == "replay":
            raise ReplayMissError(digest, kind)
        return None

    def store(self, digest: str, kind: str, response: Any) -> None:
        with self._lock:
            if digest in self.entries:
                return
            self.entries[digest] = response
            if self.path is not None:
                line = json.dumps(
                    {"digest": digest, "kind": kind, "response": response},
                    sort_keys=True,
                    separators=(",", ":"),
                )
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(line + "\n")

    def __len__(self) -> int:
        return len(self.entries)


class Backend(Protocol):
    """What a concrete chat/embedding provider must offer."""

    def complete(self, request: ChatRequest) -> str: ...

    def embed_text(self, text: str) -> list[float]: ...


def hash_embedding(text: str, dimension: int) -> list[float]:
    """Deterministic pseudo-embedding: identical text, identical vector.

    The sha256 of the text seeds a PRNG that fills the vector; distinct
    texts get (almost surely) non-parallel vectors. Good enough to exercise
    every similarity code path without a real embedding model.
    """
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")
    rng = random.Random(seed)
    return [rng.uniform(-1.0, 1.0) for _ in range(dimension)]


class MockBackend:
    """Deterministic scripted backend for tests and offline demos.

    Chat: the first rule whose required substrings all occur in the request
    text wins; otherwise responses fall back to an ordinal list consumed in
    call order. Running out of both is an error, so fixtures fail loudly.
    Embeddings come from :func:`hash_embedding`.
    """

    def __init__(
        self,
        rules: Iterable[tuple[Sequence[str] | str, str]] = (),
        fallback_responses: Sequence[str] = (),
        embedding_dimension: int = 32,
    ):
        self.rules: list[tuple[tuple[str, ...], str]] = [
            ((needles,) if isinstance(needles, str) else tuple(needles), response)
            for needles, response in rules
        ]
        self.fallback_responses = list(fallback_responses)
        self.embedding_dimension = embedding_dimension
        self._fallback_cursor = 0
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> str:
        text = request.text
        for needles, response in self.rules:
            if all(needle in text for needle in needles):
                return response
        with self._lock:
            if self._fallback_cursor < len(self.fallback_responses):
                response = self.fallback_responses[self._fallback_cursor]
                self._fallback_cursor += 1
                return response
        raise MockExhaustedError(
            "no mock rule matched and fallback responses are exhausted; "
            f"request began: {text[:120]!r}"
        )

    def embed_text(self, text: str) -> list[float]:
        return hash_embedding(text, self.embedding_dimension)


class HttpBackend:
    """Minimal JSON-over-HTTP backend (chat-completions style endpoints).

    The API key is read from the environment variable named in the config
    and is sent only as a header; it is never logged or echoed in errors.
    """

    def __init__(
        self,
        endpoint: str,
        model_tag: str,
        embedding_model_tag: str = "",
        api_key_env: str = "",
        timeout: float = 30.0,
        embedding_dimension: int = 256,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model_tag = model_tag
        self.embedding_model_tag = embedding_model_tag or model_tag
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.embedding_dimension = embedding_dimension

    def _headers(self) -> dict[str, str]:
        import os

        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, path: str, payload: dict[str, Any]) -> dict[str, Any]:
        import requests

        try:
            resp = requests.post(
                f"{self.endpoint}{path}",
                json=payload,
                headers=self._headers(),
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise BackendUnreachableError(f"backend request failed: {exc.__class__.__name__}") from exc
        if resp.status_code == 429:
            raise RateLimitedError("backend rate-limited the request")
        if resp.status_code >= 500:
            raise BackendUnreachableError(f"backend returned status {resp.status_code}")
        if resp.status_code >= 400:
            raise GatewayError(f"backend rejected the request with status {resp.status_code}")
        return resp.json()

    def complete(self, request: ChatRequest) -> str:
        payload = {
            "model": self.model_tag,
            "messages": [{"role": r, "content": c} for r, c in request.messages],
            "temperature": request.temperature,
        }
        body = self._post("/chat/completions", payload)
        try:
            return str(body["choices"][0]["message"]["content"])
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError("backend response missing chat content") from exc

    def embed_text(self, text: str) -> list[float]:
        body = self._post("/embeddings", {"model": self.embedding_model_tag, "input": text})
        try:
            return [float(v) for v in body["data"][0]["embedding"]]
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError("backend response missing embedding data") from exc


@dataclass(frozen=True)
class RetryPolicy:
    """Bounded exponential backoff with jitter for transient faults."""

    max_retries: int = 3
    base_delay: float = 1.0
    factor: float = 2.0
    jitter: float = 0.2

    def delay(self, attempt: int, rng: random.Random) -> float:
        base = self.base_delay * (self.factor**attempt)
        return base * (1.0 + rng.uniform(-self.jitter, self.jitter))


class TokenBucket:
    """Simple token-bucket rate limiter; ``acquire`` blocks until a token."""

    def __init__(self, capacity: int, refill_per_second: float, sleeper: Callable[[float], None] = time.sleep):
        if capacity < 1 or refill_per_second <= 0:
            raise ValueError("capacity must be >= 1 and refill rate positive")
        self.capacity = float(capacity)
        self.refill = refill_per_second
        self._tokens = float(capacity)
        self._stamp = time.monotonic()
        self._sleep = sleeper
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(self.capacity, self._tokens + (now - self._stamp) * self.refill)
                self._stamp = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.refill
            self._sleep(wait)


class LLMGateway:
    """The one place chat and embed calls happen.

    In replay mode a backend is optional; in live/record modes one is
    required. Retries apply only to transient transport faults
    (unreachable, rate-limited), never to replay misses.
    """

    def __init__(
        self,
        backend: Backend | None = None,
        transcript: Transcript | None = None,
        embedding_dimension: int = 32,
        retry: RetryPolicy = RetryPolicy(),
        rate_limiter: TokenBucket | None = None,
        sleeper: Callable[[float], None] = time.sleep,
        retry_seed: int = 0,
    ):
        self.backend = backend
        self.transcript = transcript if transcript is not None else Transcript("live")
        self.embedding_dimension = embedding_dimension
        self.retry = retry
        self.rate_limiter = rate_limiter
        self._sleep = sleeper
        self._rng = random.Random(retry_seed)

    def chat(self, request: ChatRequest) -> str:
        digest = canonical_digest(request)
        stored = None if self.transcript.mode == "live" else self.transcript.lookup(digest, "chat")
        if stored is not None:
            return str(stored)
        response = str(self._call(lambda: self._require_backend().complete(request)))
        if self.transcript.mode == "record":
            self.transcript.store(digest, "chat", response)
        return response

    def embed(self, text: str) -> Embedding:
        if not text:
            raise ValueError("cannot embed empty text")
        digest = canonical_digest(text)
        stored = None if self.transcript.mode == "live" else self.transcript.lookup(digest, "embed")
        if stored is not None:
            return Embedding(tuple(float(v) for v in stored))
        raw = self._call(lambda: self._require_backend().embed_text(text))
        embedding = Embedding.normalized(raw)
        if self.transcript.mode == "record":
            self.transcript.store(digest, "embed", list(embedding.vector))
        return embedding

    def _require_backend(self) -> Backend:
        if self.backend is None:
            raise BackendUnreachableError("no backend configured (transcript replay only)")
        return self.backend

    def _call(self, op: Callable[[], Any]) -> Any:
        if self.rate_limiter is not None:
            self.rate_limiter.acquire()
        last: GatewayError | None = None
        for attempt in range(self.retry.max_retries + 1):
            try:
                return op()
            except (BackendUnreachableError, RateLimitedError) as exc:
                last = exc
                if attempt < self.retry.max_retries:
                    self._sleep(self.retry.delay(attempt, self._rng))
        assert last is not None
        raise last
