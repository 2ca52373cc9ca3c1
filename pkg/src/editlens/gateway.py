"""Uniform chat-with-images provider client.

One request shape is adapted onto provider-specific HTTP chat endpoints.
The gateway layers, in order: a write-once response cache keyed by request
content, a sliding-window rate limit, an in-flight cap, and bounded retries
with exponential backoff. A deterministic file-backed mock provider makes
every pipeline runnable offline.

Cache layout: ``cache/<provider>/<key>.txt`` where ``key`` is the SHA-256 of
the canonical request content (provider id, model id, system text, user
parts with images replaced by the hash of their file bytes, and decoding
controls). Changing any byte of the request changes the key.
"""

from __future__ import annotations

import base64
import difflib
import json
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .model import EditLensError, canonical_json, content_hash

__all__ = [
    "ChatRequest",
    "ConfigurationError",
    "Gateway",
    "ImagePart",
    "MockFixtureError",
    "ProviderError",
    "ProviderProfile",
    "RateLimiter",
    "RetryPolicy",
    "TextPart",
    "TransportError",
    "fingerprint",
    "load_profiles",
    "mock_provider",
]


class ConfigurationError(EditLensError):
    """Invalid or incomplete provider configuration (e.g. missing auth env var)."""


class ProviderError(EditLensError):
    """Non-retryable provider failure (4xx other than 429, malformed reply)."""


class TransportError(EditLensError):
    """Retries exhausted; carries the per-attempt failure log."""

    def __init__(self, message: str, attempts: list[str]):
        self.attempts = attempts
        log = "; ".join(attempts)
        super().__init__(f"{message} after {len(attempts)} attempt(s): {log}")


class MockFixtureError(EditLensError):
    """No fixture matched the request; lists the nearest known keys."""


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    path: str

    def read_bytes(self) -> bytes:
        return Path(self.path).read_bytes()


@dataclass(frozen=True)
class ChatRequest:
    """One chat completion request: system text plus ordered user parts.

    ``fixture_id`` is routing metadata for the mock provider only; it is not
    part of the request content and does not affect the cache key.
    """

    system_text: str
    user_parts: tuple[TextPart | ImagePart, ...]
    response_format: str | None = None  # "json" requests a structured reply
    temperature: float | None = None
    max_tokens: int | None = None
    fixture_id: str | None = None

    def __post_init__(self) -> None:
        if not self.user_parts:
            raise ValueError("ChatRequest requires at least one user part")


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 4
    backoff_base: float = 0.5  # delay = base * 2**(attempt-1), seconds

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ConfigurationError("retry policy requires max_attempts >= 1")


@dataclass(frozen=True)
class ProviderProfile:
    """Named backend configuration; `name` doubles as the cache directory key."""

    name: str
    kind: str  # "http" | "mock"
    model: str
    endpoint: str = ""
    auth_env: str = ""
    requests_per_minute: int = 60
    max_in_flight: int = 4
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    timeout: float = 120.0
    fixture_dir: str = ""  # mock only
    extra_options: dict = field(default_factory=dict)  # opaque passthrough (e.g. thinking budget)

    def __post_init__(self) -> None:
        if self.requests_per_minute <= 0 or self.max_in_flight <= 0:
            raise ConfigurationError("rate and in-flight limits must be positive")
        if self.kind not in ("http", "mock"):
            raise ConfigurationError(f"unknown provider kind {self.kind!r}")
        if self.kind == "mock" and not self.fixture_dir:
            raise ConfigurationError("mock profile requires fixture_dir")


def mock_provider(fixture_dir: str | Path, name: str = "mock", model: str = "mock-judge") -> ProviderProfile:
    """Profile backed by canned response files; offline and deterministic."""
    return ProviderProfile(
        name=name,
        kind="mock",
        model=model,
        fixture_dir=str(fixture_dir),
        requests_per_minute=1_000_000,
        max_in_flight=64,
        retry=RetryPolicy(max_attempts=1, backoff_base=0.0),
    )


def load_profiles(path: str | Path) -> dict[str, ProviderProfile]:
    """Load named profiles from a JSON config file."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    profiles: dict[str, ProviderProfile] = {}
    for name, cfg in raw.items():
        if not isinstance(cfg, dict):
            raise ConfigurationError(f"profile {name!r}: expected object")
        retry_cfg = cfg.pop("retry", {})
        retry = RetryPolicy(
            max_attempts=int(retry_cfg.get("max_attempts", 4)),
            backoff_base=float(retry_cfg.get("backoff_base", 0.5)),
        )
        try:
            profiles[name] = ProviderProfile(name=name, retry=retry, **cfg)
        except TypeError as exc:
            raise ConfigurationError(f"profile {name!r}: {exc}") from None
    return profiles


def _part_content(part: TextPart | ImagePart) -> dict:
    if isinstance(part, TextPart):
        return {"text": part.text}
    return {"image_sha256": content_hash(part.read_bytes())}


def fingerprint(profile: ProviderProfile, request: ChatRequest) -> str:
    """Content-addressed cache key; image parts hashed by their file bytes."""
    payload = {
        "provider": profile.name,
        "model": profile.model,
        "system_text": request.system_text,
        "user_parts": [_part_content(p) for p in request.user_parts],
        "response_format": request.response_format,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    }
    return content_hash(canonical_json(payload).encode("utf-8"))


class RateLimiter:
    """Sliding-window limiter: at most `limit` acquisitions per `window` seconds.

    `acquire` blocks until admitting the caller keeps every trailing window
    within the limit. Timestamps are recorded at admission, so bursts after a
    quiet period are allowed up to the full limit. Clock and sleep are
    injectable for deterministic tests.
    """

    def __init__(
        self,
        limit: int,
        window: float = 60.0,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if limit <= 0:
            raise ConfigurationError("rate limit must be positive")
        self.limit = limit
        self.window = window
        self._clock = clock
        self._sleep = sleep
        self._stamps: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._stamps and now - self._stamps[0] >= self.window:
                    self._stamps.popleft()
                if len(self._stamps) < self.limit:
                    self._stamps.append(now)
                    return
                wait = self.window - (now - self._stamps[0])
            self._sleep(max(wait, 1e-4))


def _default_post(url: str, headers: dict, payload: dict, timeout: float) -> tuple[int, str]:
    import requests

    try:
        resp = requests.post(url, headers=headers, json=payload, timeout=timeout)
    except requests.Timeout as exc:
        raise TimeoutError(str(exc)) from exc
    except requests.ConnectionError as exc:
        raise ConnectionError(str(exc)) from exc
    return resp.status_code, resp.text


_MIME = {".png": "image/png", ".jpg": "image/jpeg", ".jpeg": "image/jpeg", ".webp": "image/webp", ".gif": "image/gif"}


class _HttpTransport:
    """Adapter onto a chat-completions style JSON endpoint."""

    def __init__(self, profile: ProviderProfile, post_fn=None):
        self.profile = profile
        self.post_fn = post_fn or _default_post

    def _auth_headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.profile.auth_env:
            token = os.environ.get(self.profile.auth_env)
            if not token:
                raise ConfigurationError(
                    f"auth token environment variable {self.profile.auth_env!r} is not set"
                )
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _payload(self, request: ChatRequest) -> dict:
        content: list[dict] = []
        for part in request.user_parts:
            if isinstance(part, TextPart):
                content.append({"type": "text", "text": part.text})
            else:
                data = part.read_bytes()
                mime = _MIME.get(Path(part.path).suffix.lower(), "application/octet-stream")
                url = f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}"
                content.append({"type": "image_url", "image_url": {"url": url}})
        payload: dict[str, Any] = {
            "model": self.profile.model,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": content},
            ],
        }
        if request.temperature is not None:
            payload["temperature"] = request.temperature
        if request.max_tokens is not None:
            payload["max_tokens"] = request.max_tokens
        if request.response_format == "json":
            payload["response_format"] = {"type": "json_object"}
        payload.update(self.profile.extra_options)
        return payload

    def send(self, request: ChatRequest) -> str:
        """One dispatch attempt. Raises TimeoutError/ConnectionError (retryable),
        ProviderError tagged retryable for 429/5xx, fatal otherwise."""
        headers = self._auth_headers()
        payload = self._payload(request)
        status, text = self.post_fn(self.profile.endpoint, headers, payload, self.profile.timeout)
        if status == 429 or 500 <= status < 600:
            raise _RetryableStatus(f"HTTP {status}: {text[:200]}")
        if status != 200:
            raise ProviderError(f"HTTP {status}: {text[:500]}")
        try:
            data = json.loads(text)
            return data["choices"][0]["message"]["content"]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"unexpected response shape: {exc}") from None


class _RetryableStatus(Exception):
    pass


class _MockTransport:
    """File-backed provider: fixture id first, request fingerprint second.

    Response files are plain text, ``<fixture_dir>/<key>.txt``; keys may
    contain ``/`` to organize fixtures in subdirectories. A miss raises with
    the nearest known keys to make authoring typos obvious.
    """

    def __init__(self, profile: ProviderProfile):
        self.profile = profile
        self.fixture_dir = Path(profile.fixture_dir)
        self.calls: list[str] = []
        self._lock = threading.Lock()

    def _known_keys(self) -> list[str]:
        return sorted(
            str(p.relative_to(self.fixture_dir))[: -len(".txt")]
            for p in self.fixture_dir.rglob("*.txt")
        )

    def send(self, request: ChatRequest) -> str:
        tried: list[str] = []
        for key in (request.fixture_id, fingerprint(self.profile, request)):
            if not key:
                continue
            tried.append(key)
            path = self.fixture_dir / f"{key}.txt"
            if path.exists():
                with self._lock:
                    self.calls.append(key)
                return path.read_text(encoding="utf-8")
        known = self._known_keys()
        nearest = difflib.get_close_matches(tried[0] if tried else "", known, n=5, cutoff=0.0)
        raise MockFixtureError(
            f"no fixture for request (tried keys: {tried}); nearest known keys: {nearest}"
        )


class Gateway:
    """Thread-safe completion client for one provider profile.

    `complete` returns cached text when the key exists (unless `no_cache`),
    otherwise dispatches under the rate limit and in-flight cap, retrying
    timeouts, connection resets, and HTTP 429/5xx with exponential backoff,
    then writes the cache entry. The cache is write-once: `no_cache` forces a
    re-dispatch but never deletes or overwrites an existing entry.
    """

    def __init__(
        self,
        profile: ProviderProfile,
        cache_dir: str | Path | None = None,
        post_fn=None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.profile = profile
        self.cache_dir = Path(cache_dir) / profile.name if cache_dir else None
        self._transport = (
            _MockTransport(profile) if profile.kind == "mock" else _HttpTransport(profile, post_fn)
        )
        self._limiter = RateLimiter(profile.requests_per_minute, clock=clock, sleep=sleep)
        self._in_flight = threading.Semaphore(profile.max_in_flight)
        self._sleep = sleep
        self._stats_lock = threading.Lock()
        self.dispatches = 0
        self.cache_hits = 0

    @property
    def mock_calls(self) -> list[str]:
        if isinstance(self._transport, _MockTransport):
            return self._transport.calls
        return []

    def _cache_path(self, key: str) -> Path | None:
        if self.cache_dir is None:
            return None
        return self.cache_dir / f"{key}.txt"

    def complete(self, request: ChatRequest, no_cache: bool = False) -> str:
        for part in request.user_parts:
            if isinstance(part, ImagePart) and not Path(part.path).exists():
                raise EditLensError(f"image not resolvable: {part.path}")

        key = fingerprint(self.profile, request)
        cache_path = self._cache_path(key)
        if cache_path is not None and not no_cache and cache_path.exists():
            with self._stats_lock:
                self.cache_hits += 1
            return cache_path.read_text(encoding="utf-8")

        text = self._dispatch_with_retry(request)

        if cache_path is not None and not cache_path.exists():
            cache_path.parent.mkdir(parents=True, exist_ok=True)
            tmp = cache_path.with_suffix(f".tmp-{threading.get_ident()}")
            tmp.write_text(text, encoding="utf-8")
            try:
                tmp.rename(cache_path)
            except OSError:
                tmp.unlink(missing_ok=True)
        return text

    def _dispatch_with_retry(self, request: ChatRequest) -> str:
        attempts: list[str] = []
        policy = self.profile.retry
        for attempt in range(1, policy.max_attempts + 1):
            self._limiter.acquire()
            with self._in_flight:
                try:
                    text = self._transport.send(request)
                except (TimeoutError, ConnectionError, _RetryableStatus) as exc:
                    attempts.append(f"attempt {attempt}: {exc}")
                    with self._stats_lock:
                        self.dispatches += 1
                    if attempt < policy.max_attempts:
                        self._sleep(policy.backoff_base * (2 ** (attempt - 1)))
                    continue
            with self._stats_lock:
                self.dispatches += 1
            return text
        raise TransportError("retries exhausted", attempts)


def complete(
    profile: ProviderProfile,
    request: ChatRequest,
    cache_dir: str | Path | None = None,
    no_cache: bool = False,
) -> str:
    """One-shot convenience wrapper around a throwaway :class:`Gateway`."""
    return Gateway(profile, cache_dir=cache_dir).complete(request, no_cache=no_cache)
