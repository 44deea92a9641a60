"""Uniform model-backend abstraction.

Every model call in the pipeline flows through a `Backend`: either the live
chat-completion HTTP client or the deterministic scripted backend used for
tests and replay. Transport-level retry (network errors) lives here; the
schema-validation retry discipline is owned by the screening/jury/meta
modules, which re-prompt on content failures.
"""
from __future__ import annotations

import base64
import enum
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence, Union

import requests

from .errors import (
    AuthError,
    BackendError,
    RateLimited,
    ScriptExhausted,
    TransportError,
    TransportTimeout,
    UnknownBackendPrice,
)


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    path: str


ContentPart = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class ModelRequest:
    backend_id: str
    system_prompt: str
    user_content: tuple[ContentPart, ...]
    max_output_tokens: int
    temperature: float

    def __post_init__(self):
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def text_content(self) -> str:
        return "\n".join(p.text for p in self.user_content if isinstance(p, TextPart))


@dataclass(frozen=True)
class ModelResponse:
    text: str
    input_tokens: int = 0
    output_tokens: int = 0
    latency_ms: int = 0

    def __post_init__(self):
        if self.input_tokens < 0 or self.output_tokens < 0 or self.latency_ms < 0:
            raise ValueError("token counts and latency must be non-negative")


class Backend(Protocol):
    backend_id: str

    def complete(self, request: ModelRequest) -> ModelResponse: ...


class ScriptedBackend:
    """Deterministic backend replaying a FIFO queue of canned responses.

    Script entries may be strings, ModelResponse objects, mappings with
    text/token fields, or exceptions (raised when reached). Thread-safe;
    every request is appended to `call_log` for audit assertions.
    """

    def __init__(
        self,
        backend_id: str,
        responses: Iterable[Any] = (),
        on_exhausted: str = "fail",  # "fail" | "repeat"
        default_input_tokens: int = 100,
        default_output_tokens: int = 50,
        default_latency_ms: int = 5,
    ):
        if on_exhausted not in ("fail", "repeat"):
            raise ValueError(f"bad on_exhausted mode: {on_exhausted!r}")
        self.backend_id = backend_id
        self.on_exhausted = on_exhausted
        self._defaults = (default_input_tokens, default_output_tokens, default_latency_ms)
        self._queue: deque = deque(self._coerce(r) for r in responses)
        self._last: Any = None
        self._lock = threading.Lock()
        self.call_log: list[ModelRequest] = []

    def _coerce(self, entry: Any):
        if isinstance(entry, (ModelResponse, Exception)):
            return entry
        din, dout, dlat = self._defaults
        if isinstance(entry, str):
            return ModelResponse(entry, din, dout, dlat)
        if isinstance(entry, Mapping):
            return ModelResponse(
                text=entry["text"],
                input_tokens=int(entry.get("input_tokens", din)),
                output_tokens=int(entry.get("output_tokens", dout)),
                latency_ms=int(entry.get("latency_ms", dlat)),
            )
        raise TypeError(f"unsupported script entry: {entry!r}")

    def push(self, *entries: Any) -> None:
        with self._lock:
            self._queue.extend(self._coerce(e) for e in entries)

    def complete(self, request: ModelRequest) -> ModelResponse:
        with self._lock:
            self.call_log.append(request)
            if self._queue:
                item = self._queue.popleft()
                self._last = item
            elif self.on_exhausted == "repeat" and self._last is not None:
                item = self._last
            else:
                raise ScriptExhausted(f"script for backend {self.backend_id!r} is exhausted")
        if isinstance(item, Exception):
            raise item
        return item


def _data_url(path: str) -> str:
    suffix = path.rsplit(".", 1)[-1].lower()
    mime = {"png": "image/png", "jpg": "image/jpeg", "jpeg": "image/jpeg", "webp": "image/webp"}.get(
        suffix, "image/png"
    )
    with open(path, "rb") as fh:
        payload = base64.b64encode(fh.read()).decode("ascii")
    return f"data:{mime};base64,{payload}"


class HttpChatBackend:
    """Live client for chat-completion-style HTTP endpoints.

    Sends system + user messages (user content may carry base64 data-URL
    images), reads the reply text and token usage from the response body.
    Credentials come from the environment variable named in config.
    """

    def __init__(
        self,
        backend_id: str,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        timeout_s: float = 120.0,
        concurrency: int = 4,
        session: requests.Session | None = None,
    ):
        self.backend_id = backend_id
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.timeout_s = timeout_s
        self._session = session or requests.Session()
        self._slots = threading.Semaphore(max(1, concurrency))

    def _payload(self, request: ModelRequest) -> dict:
        parts: list[dict] = []
        for part in request.user_content:
            if isinstance(part, TextPart):
                parts.append({"type": "text", "text": part.text})
            else:
                parts.append({"type": "image_url", "image_url": {"url": _data_url(part.path)}})
        messages = []
        if request.system_prompt:
            messages.append({"role": "system", "content": request.system_prompt})
        messages.append({"role": "user", "content": parts})
        return {
            "model": self.model,
            "messages": messages,
            "max_tokens": request.max_output_tokens,
            "temperature": request.temperature,
        }

    def complete(self, request: ModelRequest) -> ModelResponse:
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        started = time.monotonic()
        with self._slots:
            try:
                resp = self._session.post(
                    self.endpoint,
                    json=self._payload(request),
                    headers=headers,
                    timeout=self.timeout_s,
                )
            except requests.Timeout as exc:
                raise TransportTimeout(f"{self.backend_id}: request timed out") from exc
            except requests.RequestException as exc:
                raise TransportError(f"{self.backend_id}: {exc}") from exc
        latency_ms = int((time.monotonic() - started) * 1000)
        if resp.status_code in (401, 403):
            raise AuthError(f"{self.backend_id}: HTTP {resp.status_code}")
        if resp.status_code == 429:
            retry_after = None
            header = resp.headers.get("Retry-After")
            if header is not None:
                try:
                    retry_after = float(header)
                except ValueError:
                    pass
            raise RateLimited(f"{self.backend_id}: rate limited", retry_after=retry_after)
        if resp.status_code >= 400:
            raise TransportError(f"{self.backend_id}: HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"{self.backend_id}: malformed response body") from exc
        if text is None or text == "":
            raise TransportError(f"{self.backend_id}: empty completion text")
        usage = body.get("usage") or {}
        return ModelResponse(
            text=text,
            input_tokens=int(usage.get("prompt_tokens", 0)),
            output_tokens=int(usage.get("completion_tokens", 0)),
            latency_ms=latency_ms,
        )


class RetryingBackend:
    """Exponential-backoff wrapper for transport-class failures.

    Auth errors are not retried. Rate limits honor the server's retry-after
    hint when present.
    """

    def __init__(
        self,
        inner: Backend,
        max_attempts: int = 3,
        base_delay_s: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self.inner = inner
        self.backend_id = inner.backend_id
        self.max_attempts = max_attempts
        self.base_delay_s = base_delay_s
        self._sleep = sleep

    def complete(self, request: ModelRequest) -> ModelResponse:
        last: BackendError | None = None
        for attempt in range(self.max_attempts):
            try:
                return self.inner.complete(request)
            except AuthError:
                raise
            except RateLimited as exc:
                last = exc
                delay = exc.retry_after if exc.retry_after is not None else self.base_delay_s * 2**attempt
            except TransportError as exc:
                last = exc
                delay = self.base_delay_s * 2**attempt
            except BackendError:
                raise  # script exhaustion and friends are not transient
            if attempt + 1 < self.max_attempts:
                self._sleep(delay)
        raise last


@dataclass(frozen=True)
class BackendHandle:
    """A backend plus its per-stage call parameters."""

    backend: Backend
    max_output_tokens: int
    temperature: float

    @property
    def backend_id(self) -> str:
        return self.backend.backend_id

    def ask(self, system_prompt: str, parts: Sequence[ContentPart]) -> ModelResponse:
        request = ModelRequest(
            backend_id=self.backend_id,
            system_prompt=system_prompt,
            user_content=tuple(parts),
            max_output_tokens=self.max_output_tokens,
            temperature=self.temperature,
        )
        return self.backend.complete(request)


# --- cost accounting ---

class Stage(enum.Enum):
    SCREENING = "screening"
    JURY = "jury"
    META = "meta"


_COST_QUANTUM = Decimal("0.000001")
_PCT_QUANTUM = Decimal("0.1")


@dataclass(frozen=True)
class BackendPrice:
    input_per_million: Decimal
    output_per_million: Decimal

    @classmethod
    def of(cls, input_per_million, output_per_million) -> "BackendPrice":
        return cls(Decimal(str(input_per_million)), Decimal(str(output_per_million)))


class PriceTable:
    def __init__(self, prices: Mapping[str, BackendPrice]):
        self._prices = dict(prices)

    def cost(self, backend_id: str, input_tokens: int, output_tokens: int) -> Decimal:
        price = self._prices.get(backend_id)
        if price is None:
            raise UnknownBackendPrice(f"no price configured for backend {backend_id!r}")
        raw = (
            Decimal(input_tokens) * price.input_per_million
            + Decimal(output_tokens) * price.output_per_million
        ) / Decimal(1_000_000)
        return raw.quantize(_COST_QUANTUM, rounding=ROUND_HALF_UP)


@dataclass(frozen=True)
class CostEntry:
    backend_id: str
    stage: Stage
    input_tokens: int
    output_tokens: int
    cost_usd: Decimal

    def to_dict(self) -> dict:
        return {
            "backend_id": self.backend_id,
            "stage": self.stage.value,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "cost_usd": str(self.cost_usd),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CostEntry":
        return cls(
            backend_id=data["backend_id"],
            stage=Stage(data["stage"]),
            input_tokens=int(data["input_tokens"]),
            output_tokens=int(data["output_tokens"]),
            cost_usd=Decimal(data["cost_usd"]),
        )


class CostLedger:
    """Append-only run ledger. Entry order is not significant, sums are."""

    def __init__(self, prices: PriceTable, entries: Iterable[CostEntry] = ()):
        self._prices = prices
        self._entries: list[CostEntry] = list(entries)
        self._lock = threading.Lock()

    def record(self, backend_id: str, stage: Stage, response: ModelResponse) -> CostEntry:
        entry = CostEntry(
            backend_id=backend_id,
            stage=stage,
            input_tokens=response.input_tokens,
            output_tokens=response.output_tokens,
            cost_usd=self._prices.cost(backend_id, response.input_tokens, response.output_tokens),
        )
        with self._lock:
            self._entries.append(entry)
        return entry

    @property
    def entries(self) -> tuple[CostEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    def total(self) -> Decimal:
        return sum((e.cost_usd for e in self.entries), Decimal(0))

    def stage_totals(self) -> dict[Stage, Decimal]:
        totals: dict[Stage, Decimal] = {}
        for entry in self.entries:
            totals[entry.stage] = totals.get(entry.stage, Decimal(0)) + entry.cost_usd
        return totals

    def stage_proportions(self) -> dict[Stage, Decimal]:
        """Per-stage share of total cost, in percent rounded to 1 decimal."""
        totals = self.stage_totals()
        grand = sum(totals.values(), Decimal(0))
        if grand == 0:
            return {stage: Decimal("0.0") for stage in totals}
        return {
            stage: (value * 100 / grand).quantize(_PCT_QUANTUM, rounding=ROUND_HALF_UP)
            for stage, value in totals.items()
        }

    def to_dict(self) -> dict:
        totals = self.stage_totals()
        proportions = self.stage_proportions()
        return {
            "entries": [e.to_dict() for e in self.entries],
            "stage_totals": {s.value: str(v) for s, v in sorted(totals.items(), key=lambda kv: kv[0].value)},
            "stage_proportions": {s.value: str(v) for s, v in sorted(proportions.items(), key=lambda kv: kv[0].value)},
            "total": str(self.total()),
        }

    def keep_stages(self, stages: Iterable[Stage]) -> None:
        wanted = set(stages)
        with self._lock:
            self._entries = [e for e in self._entries if e.stage in wanted]
