"""Transport-level providers.

A provider performs exactly one call and reports the result or raises one of
the ``ProviderError`` subclasses; retries, rate limiting and schema checks
live in ``LLMClient``.
"""
from __future__ import annotations

import os
import time
from typing import Protocol, runtime_checkable

import httpx

from .types import (
    ChatRequest,
    ContentFiltered,
    ProviderError,
    ProviderReply,
    ProviderTimeout,
    RateLimited,
    ServerError,
    TokenLogprobs,
    TranslationError,
    UnsupportedProvider,
)

_FILTER_CODES = {"content_filter", "content_policy_violation", "responsibleaipolicyviolation"}


@runtime_checkable
class Provider(Protocol):
    def chat(self, request: ChatRequest) -> ProviderReply: ...

    def token_logprobs(self, model: str, prefix: str, candidate: str) -> TokenLogprobs: ...


@runtime_checkable
class Translator(Protocol):
    def translate_one(self, text: str, source_lang: str, target_lang: str) -> str: ...


def _error_code(resp: httpx.Response) -> str:
    try:
        err = resp.json().get("error") or {}
    except ValueError:
        return ""
    if not isinstance(err, dict):
        return str(err)
    inner = err.get("innererror") or {}
    return str(inner.get("code") or err.get("code") or "")


def _raise_for(resp: httpx.Response) -> None:
    if resp.status_code < 400:
        return
    code = _error_code(resp)
    if resp.status_code == 429:
        raise RateLimited(f"HTTP 429 {code}".strip())
    if resp.status_code in (408, 504):
        raise ProviderTimeout(f"HTTP {resp.status_code}")
    if resp.status_code >= 500:
        raise ServerError(f"HTTP {resp.status_code} {code}".strip(), code=f"http_{resp.status_code}")
    if code.lower() in _FILTER_CODES:
        raise ContentFiltered(f"HTTP {resp.status_code} {code}")
    raise ProviderError(f"HTTP {resp.status_code} {code}".strip(), code=code or f"http_{resp.status_code}")


class HTTPProvider:
    """Chat-completions-compatible HTTP JSON API.

    ``chat`` posts to ``{endpoint}/chat/completions``; continuation scoring
    uses the legacy ``{endpoint}/completions`` route with ``echo`` and
    ``logprobs`` so the prompt tokens come back scored.
    """

    def __init__(self, endpoint: str, api_key: str | None = None, timeout: float = 60.0,
                 http_client: httpx.Client | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get("LLM_API_KEY")
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
            headers["api-key"] = self.api_key
        self._http = http_client or httpx.Client(timeout=timeout)
        self._headers = headers

    def _post(self, route: str, payload: dict) -> tuple[dict, int]:
        t0 = time.perf_counter()
        try:
            resp = self._http.post(f"{self.endpoint}/{route}", json=payload, headers=self._headers)
        except httpx.TimeoutException as exc:
            raise ProviderTimeout(str(exc)) from exc
        except httpx.TransportError as exc:
            raise ServerError(str(exc), code="transport") from exc
        latency = int((time.perf_counter() - t0) * 1000)
        if resp.status_code == 404 and route == "completions":
            raise UnsupportedProvider("endpoint has no completions route")
        _raise_for(resp)
        try:
            return resp.json(), latency
        except ValueError as exc:
            raise ServerError("response is not JSON", code="bad_json") from exc

    def chat(self, request: ChatRequest) -> ProviderReply:
        payload = {
            "model": request.model,
            "messages": request.messages_payload(),
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.response_schema is not None:
            payload["response_format"] = {
                "type": "json_schema",
                "json_schema": {"name": "response", "schema": request.response_schema},
            }
        data, latency = self._post("chat/completions", payload)
        try:
            choice = data["choices"][0]
        except (KeyError, IndexError, TypeError) as exc:
            raise ServerError("no choices in response", code="bad_response") from exc
        finish = choice.get("finish_reason")
        content = (choice.get("message") or {}).get("content")
        if finish == "content_filter" and not content:
            raise ContentFiltered("completion filtered")
        return ProviderReply(content or "", finish, latency)

    def token_logprobs(self, model: str, prefix: str, candidate: str) -> TokenLogprobs:
        payload = {
            "model": model,
            "prompt": prefix + candidate,
            "max_tokens": 0,
            "echo": True,
            "logprobs": 0,
            "temperature": 0,
        }
        data, latency = self._post("completions", payload)
        try:
            lp = data["choices"][0]["logprobs"]
            tokens, values, offsets = lp["tokens"], lp["token_logprobs"], lp["text_offset"]
        except (KeyError, IndexError, TypeError) as exc:
            raise UnsupportedProvider("provider returned no prompt logprobs") from exc
        cut = len(prefix)
        picked = [v for tok, v, off in zip(tokens, values, offsets) if off + len(tok) > cut and v is not None]
        if not picked:
            raise UnsupportedProvider("no scored tokens after the prefix")
        return TokenLogprobs(tuple(float(v) for v in picked), latency)

    def close(self) -> None:
        self._http.close()


class HTTPTranslator:
    """Translator-API style endpoint: POST ``[{"Text": ...}]``, get translations back."""

    def __init__(self, endpoint: str | None = None, api_key: str | None = None, timeout: float = 60.0,
                 http_client: httpx.Client | None = None):
        endpoint = endpoint or os.environ.get("LLM_TRANSLATE_ENDPOINT")
        if not endpoint:
            raise ValueError("no translation endpoint configured (LLM_TRANSLATE_ENDPOINT)")
        self.endpoint = endpoint.rstrip("/")
        key = api_key if api_key is not None else os.environ.get("LLM_API_KEY")
        self._headers = {"Ocp-Apim-Subscription-Key": key} if key else {}
        self._http = http_client or httpx.Client(timeout=timeout)

    def translate_one(self, text: str, source_lang: str, target_lang: str) -> str:
        params = {"api-version": "3.0", "from": source_lang, "to": target_lang}
        try:
            resp = self._http.post(f"{self.endpoint}/translate", params=params, json=[{"Text": text}],
                                   headers=self._headers)
        except httpx.HTTPError as exc:
            raise TranslationError(str(exc)) from exc
        if resp.status_code >= 400:
            raise TranslationError(f"HTTP {resp.status_code}")
        try:
            return resp.json()[0]["translations"][0]["text"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TranslationError("malformed translation response") from exc
