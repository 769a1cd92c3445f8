from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

ROLES = ("system", "user", "assistant")
STATUSES = ("ok", "blocked", "parse_error", "provider_error")


class ProviderError(RuntimeError):
    """Non-retryable provider failure (or retries exhausted)."""

    code = "provider_error"

    def __init__(self, message: str = "", code: str | None = None, index: int | None = None):
        if code is not None:
            self.code = code
        self.index = index
        super().__init__(message or self.code)


class TransientError(ProviderError):
    code = "transient"


class RateLimited(TransientError):
    code = "rate_limit"


class ProviderTimeout(TransientError):
    code = "timeout"


class ServerError(TransientError):
    code = "server_error"


class ContentFiltered(ProviderError):
    code = "content_filter"


class UnsupportedProvider(ProviderError):
    code = "unsupported"


class TranslationError(ProviderError):
    code = "translation_failed"


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_tokens: int = 512
    response_schema: dict | None = None

    def __post_init__(self):
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        if not math.isfinite(self.temperature) or self.temperature < 0:
            raise ValueError("temperature must be finite and >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be > 0")
        object.__setattr__(self, "messages", tuple(
            m if isinstance(m, Message) else Message(m["role"], m["content"]) for m in self.messages
        ))

    @classmethod
    def user(cls, model: str, content: str, **kw) -> "ChatRequest":
        return cls(model, (Message("user", content),), **kw)

    def messages_payload(self) -> list[dict]:
        return [{"role": m.role, "content": m.content} for m in self.messages]

    @property
    def prompt_text(self) -> str:
        return "\n".join(m.content for m in self.messages)


@dataclass(frozen=True)
class ChatOutcome:
    status: str
    text: str | None = None
    structured: Any = None
    provider_code: str | None = None
    attempts: int = 1
    errors: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()
    latency_ms: int = 0

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if self.attempts < 1:
            raise ValueError("attempts must be >= 1")
        if self.status == "ok" and self.text is None and self.structured is None:
            raise ValueError("ok outcome needs text or structured payload")
        if self.status == "blocked" and (self.text is not None or self.structured is not None):
            raise ValueError("blocked outcome carries no payload")

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass(frozen=True)
class ContinuationScore:
    candidate: str
    logprob_sum: float
    token_count: int
    latency_ms: int = 0


@dataclass(frozen=True)
class ProviderReply:
    text: str
    finish_reason: str | None = None
    latency_ms: int = 0


@dataclass(frozen=True)
class TokenLogprobs:
    logprobs: tuple[float, ...]
    latency_ms: int = 0


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 5
    base_delay_ms: int = 500
    max_delay_ms: int = 30_000
    multiplier: float = 2.0

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.base_delay_ms < 0 or self.max_delay_ms < 0 or self.multiplier < 1:
            raise ValueError("delays must be >= 0 and multiplier >= 1")

    def delay_ms(self, attempt: int) -> float:
        """Wait before retry number ``attempt`` (1-based); non-decreasing."""
        return min(self.max_delay_ms, self.base_delay_ms * self.multiplier ** (attempt - 1))


@dataclass
class ClientConfig:
    model: str = ""
    temperature: float = 0.0
    max_tokens: int = 512
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    concurrency: int = 4
    requests_per_second: float | None = None
