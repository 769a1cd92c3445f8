"""Chat-completion, structured generation, continuation scoring and translation."""
from __future__ import annotations

import os

from .client import LLMClient, RateLimiter, schema_errors, unknown_fields
from .providers import HTTPProvider, HTTPTranslator, Provider, Translator
from .scripted import (
    CallableProvider,
    CallableTranslator,
    ScriptedProvider,
    chat_fingerprint,
    continuation_fingerprint,
)
from .types import (
    ChatOutcome,
    ChatRequest,
    ContentFiltered,
    ContinuationScore,
    Message,
    ProviderError,
    ProviderTimeout,
    RateLimited,
    RetryPolicy,
    ServerError,
    TransientError,
    TranslationError,
    UnsupportedProvider,
)

MOCK_SCHEME = "mock://"


def make_provider(endpoint: str, api_key: str | None = None) -> Provider:
    """``mock://<script.json>`` gives a scripted stub, anything else an HTTP provider."""
    if endpoint.startswith(MOCK_SCHEME):
        return ScriptedProvider.from_file(endpoint[len(MOCK_SCHEME):])
    return HTTPProvider(endpoint, api_key if api_key is not None else os.environ.get("LLM_API_KEY"))


__all__ = [
    "CallableProvider",
    "CallableTranslator",
    "ChatOutcome",
    "ChatRequest",
    "ContentFiltered",
    "ContinuationScore",
    "HTTPProvider",
    "HTTPTranslator",
    "LLMClient",
    "Message",
    "Provider",
    "ProviderError",
    "ProviderTimeout",
    "RateLimited",
    "RateLimiter",
    "RetryPolicy",
    "ScriptedProvider",
    "ServerError",
    "TransientError",
    "TranslationError",
    "Translator",
    "UnsupportedProvider",
    "chat_fingerprint",
    "continuation_fingerprint",
    "make_provider",
    "schema_errors",
    "unknown_fields",
]
