from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Hashable, Iterable, Sequence, TypeVar

from jsonschema import Draft202012Validator

from .providers import Provider, Translator
from .types import (
    ChatOutcome,
    ChatRequest,
    ContentFiltered,
    ContinuationScore,
    ProviderError,
    RetryPolicy,
    TransientError,
    TranslationError,
)

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class RateLimiter:
    """Bounds in-flight requests; optionally also refills a token bucket."""

    def __init__(self, concurrency: int = 4, requests_per_second: float | None = None,
                 clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        if concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        self.concurrency = concurrency
        self.rate = requests_per_second
        self._sem = threading.BoundedSemaphore(concurrency)
        self._lock = threading.Lock()
        self._clock = clock
        self._sleep = sleep
        self._tokens = float(concurrency)
        self._stamp = clock()

    def _take_token(self) -> None:
        if not self.rate:
            return
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.concurrency, self._tokens + (now - self._stamp) * self.rate)
                self._stamp = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                wait = (1 - self._tokens) / self.rate
            self._sleep(wait)

    def __enter__(self):
        self._sem.acquire()
        try:
            self._take_token()
        except BaseException:
            self._sem.release()
            raise
        return self

    def __exit__(self, *exc):
        self._sem.release()
        return False


def _pointer(parts: Iterable) -> str:
    return "".join(f"/{p}" for p in parts)


def schema_errors(schema: dict, doc) -> list[str]:
    """JSON-pointer paths of schema violations; missing fields point at the field."""
    paths = []
    for err in Draft202012Validator(schema).iter_errors(doc):
        base = list(err.absolute_path)
        if err.validator == "required" and isinstance(err.instance, dict):
            for name in err.validator_value:
                if name not in err.instance:
                    paths.append(_pointer(base + [name]))
        else:
            paths.append(_pointer(base))
    return sorted(set(paths))


def unknown_fields(schema: dict, doc, path: str = "") -> list[str]:
    out = []
    if isinstance(doc, dict) and "properties" in schema:
        props = schema["properties"]
        for key, value in doc.items():
            if key in props:
                out.extend(unknown_fields(props[key], value, f"{path}/{key}"))
            else:
                out.append(f"{path}/{key}")
    elif isinstance(doc, list) and isinstance(schema.get("items"), dict):
        for i, value in enumerate(doc):
            out.extend(unknown_fields(schema["items"], value, f"{path}/{i}"))
    return out


class LLMClient:
    """Provider-agnostic client shared by generation and evaluation workers.

    Transient failures (rate limits, timeouts, 5xx) are retried with
    exponential backoff; content-filter refusals come back as
    ``status="blocked"`` and are never retried.
    """

    def __init__(self, provider: Provider, model: str = "", *, temperature: float = 0.0,
                 max_tokens: int = 512, retry: RetryPolicy | None = None, concurrency: int = 4,
                 requests_per_second: float | None = None, translator: Translator | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.provider = provider
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.retry = retry or RetryPolicy()
        self.concurrency = concurrency
        self.translator = translator
        self._sleep = sleep
        self.limiter = RateLimiter(concurrency, requests_per_second, sleep=sleep)
        self.delays: list[float] = []
        self._delay_lock = threading.Lock()

    # -- helpers -----------------------------------------------------------

    def request(self, content: str, *, system: str | None = None, temperature: float | None = None,
                max_tokens: int | None = None, response_schema: dict | None = None) -> ChatRequest:
        messages = ([{"role": "system", "content": system}] if system else []) + [
            {"role": "user", "content": content}]
        return ChatRequest(
            self.model,
            tuple(messages),
            self.temperature if temperature is None else temperature,
            self.max_tokens if max_tokens is None else max_tokens,
            response_schema,
        )

    def _backoff(self, attempt: int, retry: RetryPolicy) -> None:
        delay = retry.delay_ms(attempt) / 1000.0
        with self._delay_lock:
            self.delays.append(delay)
        self._sleep(delay)

    def _with_retry(self, call: Callable[[], R], retry: RetryPolicy) -> tuple[R, int]:
        """Run *call* with retries on transient errors; returns (result, attempts)."""
        attempt = 1
        while True:
            try:
                with self.limiter:
                    return call(), attempt
            except TransientError as exc:
                if attempt >= retry.max_attempts:
                    exc.attempts = attempt
                    raise
                log.debug("transient provider error (%s), attempt %d", exc.code, attempt)
                self._backoff(attempt, retry)
                attempt += 1
            except ProviderError as exc:
                exc.attempts = attempt
                raise

    # -- operations --------------------------------------------------------

    def chat_complete(self, req: ChatRequest, retry: RetryPolicy | None = None) -> ChatOutcome:
        retry = retry or self.retry
        try:
            reply, attempts = self._with_retry(lambda: self.provider.chat(req), retry)
        except ContentFiltered as exc:
            return ChatOutcome("blocked", provider_code=exc.code, attempts=exc.attempts)
        except ProviderError as exc:
            return ChatOutcome("provider_error", provider_code=exc.code, attempts=getattr(exc, "attempts", 1))
        return ChatOutcome("ok", text=reply.text, attempts=attempts, latency_ms=reply.latency_ms)

    def generate_structured(self, req: ChatRequest, retry: RetryPolicy | None = None) -> ChatOutcome:
        if req.response_schema is None:
            raise ValueError("generate_structured needs a response_schema")
        out = self.chat_complete(req, retry)
        if not out.ok:
            return out
        try:
            doc = json.loads(out.text)
        except (TypeError, ValueError):
            return ChatOutcome("parse_error", text=out.text, attempts=out.attempts, errors=("",),
                               latency_ms=out.latency_ms)
        errors = schema_errors(req.response_schema, doc)
        if errors:
            return ChatOutcome("parse_error", text=out.text, structured=doc, attempts=out.attempts,
                               errors=tuple(errors), latency_ms=out.latency_ms)
        extra = unknown_fields(req.response_schema, doc)
        for path in extra:
            log.warning("structured response has unknown field %s", path)
        return ChatOutcome("ok", text=out.text, structured=doc, attempts=out.attempts,
                           warnings=tuple(extra), latency_ms=out.latency_ms)

    def score_continuations(self, prefix: str, candidates: Sequence[str],
                            model: str | None = None) -> list[ContinuationScore]:
        """Sum of candidate token logprobs given *prefix*, in input order.

        Raises ``UnsupportedProvider`` when the endpoint cannot return prompt
        logprobs and ``ContentFiltered`` when it refuses the prompt.
        """
        if not candidates or any(not c for c in candidates):
            raise ValueError("candidates must be a non-empty list of non-empty strings")
        model = model or self.model
        scores = []
        for cand in candidates:
            lp, _ = self._with_retry(lambda c=cand: self.provider.token_logprobs(model, prefix, c), self.retry)
            if not lp.logprobs:
                raise ProviderError("empty logprob list", code="bad_response")
            scores.append(ContinuationScore(cand, float(sum(lp.logprobs)), len(lp.logprobs), lp.latency_ms))
        return scores

    def translate(self, texts: Sequence[str], source_lang: str, target_lang: str) -> list[str]:
        if source_lang == target_lang:
            return list(texts)
        if self.translator is None:
            raise TranslationError("no translation provider configured")
        out = []
        for i, text in enumerate(texts):
            try:
                out.append(self.translator.translate_one(text, source_lang, target_lang))
            except Exception as exc:
                raise TranslationError(f"translation failed for text {i}: {exc}", index=i) from exc
        return out

    def map(self, fn: Callable[[T], R], items: Sequence[T], key: Callable[[T], Hashable],
            workers: int | None = None) -> dict:
        """Apply *fn* over *items* on a worker pool; results keyed by ``key(item)``.

        Keying (not completion order) is what makes downstream aggregation
        independent of scheduling.
        """
        workers = workers or self.concurrency
        if workers <= 1:
            return {key(it): fn(it) for it in items}
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {key(it): pool.submit(fn, it) for it in items}
            return {k: f.result() for k, f in futures.items()}
