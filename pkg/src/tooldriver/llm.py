"""Uniform access to chat-completion backends.

Adds exact token-cost accounting on top of any backend, enforces the
per-task cost cap, and provides a deterministic record/replay backend so
whole agent runs can be re-executed offline, byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from decimal import Decimal
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Protocol

from .errors import BackendError, BudgetExceededError, ReplayMismatchError

logger = logging.getLogger(__name__)

Message = dict[str, str]

_MTOK = Decimal(1_000_000)


@dataclass(frozen=True)
class ModelProfile:
    model_id: str
    input_price_per_mtok: Decimal
    output_price_per_mtok: Decimal
    max_input_tokens: int
    max_output_tokens: int

    def __post_init__(self) -> None:
        if self.input_price_per_mtok < 0 or self.output_price_per_mtok < 0:
            raise ValueError("prices must be non-negative")
        if self.max_input_tokens <= 0 or self.max_output_tokens <= 0:
            raise ValueError("token limits must be positive")


def load_pricing(path: str | None = None) -> dict[str, ModelProfile]:
    """Pricing table (prices per 1M tokens) keyed by model id."""
    if path is None:
        raw = resources.files("tooldriver.data").joinpath("pricing.json").read_text()
    else:
        with open(path, encoding="utf-8") as handle:
            raw = handle.read()
    doc = json.loads(raw)
    profiles = {}
    for entry in doc["models"]:
        profile = ModelProfile(
            model_id=entry["model_id"],
            input_price_per_mtok=Decimal(entry["input_price_per_mtok"]),
            output_price_per_mtok=Decimal(entry["output_price_per_mtok"]),
            max_input_tokens=int(entry["max_input_tokens"]),
            max_output_tokens=int(entry["max_output_tokens"]),
        )
        profiles[profile.model_id] = profile
    return profiles


def exchange_cost(profile: ModelProfile, tokens_in: int, tokens_out: int) -> Decimal:
    """Closed-form cost, exact decimal arithmetic (no float rounding)."""
    return (
        Decimal(tokens_in) * profile.input_price_per_mtok
        + Decimal(tokens_out) * profile.output_price_per_mtok
    ) / _MTOK


@dataclass(frozen=True)
class CompletionExchange:
    model_id: str
    messages: tuple[Message, ...]
    response: str
    tokens_in: int
    tokens_out: int
    cost: Decimal


class CostLedger:
    """Cumulative cost of one task; accounting is atomic per exchange.

    Cap enforcement is post hoc: an exchange is refused only when the ledger
    is already at or over the cap, so at most one exchange may cross it; the
    task terminates at the next cycle boundary.
    """

    def __init__(self, cap: Decimal):
        if cap <= 0:
            raise ValueError("cost cap must be positive")
        self.cap = cap
        self.total = Decimal("0")
        self.exchanges: list[CompletionExchange] = []
        self._lock = threading.Lock()

    @property
    def exhausted(self) -> bool:
        return self.total >= self.cap

    def charge(self, exchange: CompletionExchange) -> None:
        with self._lock:
            self.exchanges.append(exchange)
            self.total += exchange.cost


@dataclass(frozen=True)
class BackendReply:
    text: str
    tokens_in: int
    tokens_out: int


class Backend(Protocol):
    def complete(self, model_id: str, messages: list[Message]) -> BackendReply: ...


def complete(
    backend: Backend,
    profile: ModelProfile,
    messages: list[Message],
    ledger: CostLedger,
    purpose: str = "",
) -> CompletionExchange:
    """One accounted exchange.

    Raises :class:`BudgetExceededError` without dispatching when the ledger
    is already at its cap.  An empty response is returned, not retried: it is
    an agent-visible event that consumes the cycle.
    """
    if not messages:
        raise ValueError("messages must be non-empty")
    if ledger.exhausted:
        raise BudgetExceededError(
            f"cost ledger at {ledger.total} of cap {ledger.cap}; refusing {purpose or 'exchange'}"
        )
    reply = backend.complete(profile.model_id, messages)
    exchange = CompletionExchange(
        model_id=profile.model_id,
        messages=tuple(dict(m) for m in messages),
        response=reply.text,
        tokens_in=reply.tokens_in,
        tokens_out=reply.tokens_out,
        cost=exchange_cost(profile, reply.tokens_in, reply.tokens_out),
    )
    ledger.charge(exchange)
    return exchange


class LlmGateway:
    """Backend + profile + ledger bundled for one task run."""

    def __init__(self, backend: Backend, profile: ModelProfile, ledger: CostLedger):
        self.backend = backend
        self.profile = profile
        self.ledger = ledger

    def complete(self, messages: list[Message], purpose: str = "") -> CompletionExchange:
        return complete(self.backend, self.profile, messages, self.ledger, purpose)


# ---------------------------------------------------------------------------
# Record / replay
# ---------------------------------------------------------------------------


def request_digest(model_id: str, messages: list[Message]) -> str:
    canonical = json.dumps(
        {"model": model_id, "messages": messages},
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class ExchangeStore:
    """Ordered archive of exchanges, persisted as JSONL."""

    entries: list[dict[str, Any]] = field(default_factory=list)

    @classmethod
    def load(cls, path: str | Path) -> "ExchangeStore":
        entries = []
        with open(path, encoding="utf-8") as handle:
            for line in handle:
                if line.strip():
                    entries.append(json.loads(line))
        return cls(entries)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            for entry in self.entries:
                handle.write(json.dumps(entry, ensure_ascii=False, sort_keys=True) + "\n")


class RecordingBackend:
    """Wraps a live backend and persists every exchange keyed by
    (sequence index, request digest)."""

    def __init__(self, inner: Backend, store: ExchangeStore):
        self.inner = inner
        self.store = store

    def complete(self, model_id: str, messages: list[Message]) -> BackendReply:
        reply = self.inner.complete(model_id, messages)
        self.store.entries.append(
            {
                "i": len(self.store.entries),
                "digest": request_digest(model_id, messages),
                "model": model_id,
                "messages": messages,
                "response": reply.text,
                "tokens_in": reply.tokens_in,
                "tokens_out": reply.tokens_out,
            }
        )
        return reply


class ReplayBackend:
    """Returns archived responses in order; fails loudly on divergence."""

    def __init__(self, store: ExchangeStore):
        if not store.entries:
            raise ValueError("replay requires a populated exchange archive")
        self.store = store
        self.cursor = 0

    def complete(self, model_id: str, messages: list[Message]) -> BackendReply:
        if self.cursor >= len(self.store.entries):
            raise ReplayMismatchError(
                f"exchange {self.cursor}: archive exhausted "
                f"({len(self.store.entries)} recorded exchanges)"
            )
        entry = self.store.entries[self.cursor]
        digest = request_digest(model_id, messages)
        if entry["digest"] != digest or entry["model"] != model_id:
            raise ReplayMismatchError(
                f"exchange {self.cursor}: request digest {digest[:12]} does not match "
                f"recorded {entry['digest'][:12]} (model {model_id!r})"
            )
        self.cursor += 1
        return BackendReply(
            text=entry["response"],
            tokens_in=int(entry["tokens_in"]),
            tokens_out=int(entry["tokens_out"]),
        )


def record_replay(
    mode: str, store: ExchangeStore, inner: Backend | None = None
) -> Backend:
    """Build a record or replay backend over ``store``."""
    if mode == "record":
        if inner is None:
            raise ValueError("record mode needs an inner backend")
        return RecordingBackend(inner, store)
    if mode == "replay":
        return ReplayBackend(store)
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# OpenAI-compatible HTTP backend
# ---------------------------------------------------------------------------


class HttpBackend:
    """Minimal OpenAI-compatible chat-completions client.

    Transient transport failures are retried 3 times with exponential
    backoff; an empty completion is returned as-is (never retried).
    """

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        timeout: float = 120.0,
        max_retries: int = 3,
        sleep=time.sleep,
    ):
        self.base_url = (
            base_url
            or os.environ.get("TOOLDRIVER_BASE_URL")
            or os.environ.get("OPENAI_BASE_URL")
            or "https://api.openai.com/v1"
        ).rstrip("/")
        self.api_key = api_key or os.environ.get("OPENAI_API_KEY", "")
        self.timeout = timeout
        self.max_retries = max_retries
        self._sleep = sleep

    def complete(self, model_id: str, messages: list[Message]) -> BackendReply:
        import httpx

        payload = {"model": model_id, "messages": messages}
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                response = httpx.post(
                    f"{self.base_url}/chat/completions",
                    json=payload,
                    headers=headers,
                    timeout=self.timeout,
                )
                if response.status_code >= 500:
                    raise BackendError(f"server error {response.status_code}")
                response.raise_for_status()
                body = response.json()
                text = body["choices"][0]["message"].get("content") or ""
                usage = body.get("usage") or {}
                tokens_in = int(usage.get("prompt_tokens") or _rough_tokens(messages))
                tokens_out = int(usage.get("completion_tokens") or len(text) // 4)
                return BackendReply(text=text, tokens_in=tokens_in, tokens_out=tokens_out)
            except httpx.HTTPStatusError as exc:
                raise BackendError(f"chat completion rejected: {exc}") from exc
            except (httpx.TransportError, BackendError, KeyError, ValueError) as exc:
                last_error = exc
                logger.warning("transport attempt %d failed: %s", attempt + 1, exc)
                self._sleep(2.0**attempt)
        raise BackendError(f"transport failed after {self.max_retries} attempts: {last_error}")


def _rough_tokens(messages: Iterable[Message]) -> int:
    return max(1, sum(len(m.get("content", "")) for m in messages) // 4)
