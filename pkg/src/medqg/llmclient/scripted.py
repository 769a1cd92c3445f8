"""In-process stand-ins for a real endpoint, used by tests and desk runs.

Script file format (JSON)::

    {
      "rules": [
        {"kind": "chat", "contains": "Proposition: Smoking",
         "responses": [{"error": "rate_limit"}, {"text": "true"}]},
        {"kind": "continuation", "contains": "Smoking", "candidate": " true",
         "response": {"logprobs": [-0.1]}},
        {"fingerprint": "3f2a...", "response": {"json": {"cases": []}}}
      ],
      "default": {"error": "content_filter"},
      "default_continuation": {"logprobs": [-1.0]}
    }

Rules are tried in order; the first match answers.  ``responses`` is played
back one entry per matching call and the last entry repeats.  An outcome is
one of ``text``, ``json`` (serialized into the reply text), ``logprobs`` or
``error`` (``rate_limit``, ``timeout``, ``server_error``, ``content_filter``,
``bad_request``, ``unsupported``), optionally with ``latency_ms``.
"""
from __future__ import annotations

import json
import os
import threading
from pathlib import Path
from typing import Callable

from .._io import canonical_json, fingerprint
from .types import (
    ChatRequest,
    ContentFiltered,
    ProviderError,
    ProviderReply,
    ProviderTimeout,
    RateLimited,
    ServerError,
    TokenLogprobs,
    UnsupportedProvider,
)

_ERRORS = {
    "rate_limit": RateLimited,
    "timeout": ProviderTimeout,
    "server_error": ServerError,
    "content_filter": ContentFiltered,
    "bad_request": lambda: ProviderError("scripted bad request", code="bad_request"),
    "unsupported": UnsupportedProvider,
}


def request_fingerprint(kind: str, payload: dict) -> str:
    """Stable id of a request; what script rules match with ``fingerprint``."""
    return fingerprint({"kind": kind, **payload}, length=64)


def chat_fingerprint(request: ChatRequest) -> str:
    return request_fingerprint("chat", {"messages": request.messages_payload()})


def continuation_fingerprint(prefix: str, candidate: str) -> str:
    return request_fingerprint("continuation", {"prefix": prefix, "candidate": candidate})


class ScriptedProvider:
    def __init__(self, script: dict):
        self.script = script
        self.rules = list(script.get("rules", []))
        self._counters = [0] * len(self.rules)
        self._lock = threading.Lock()
        self.calls = 0
        self.log: list[dict] = []

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ScriptedProvider":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def _match(self, kind: str, text: str, fp: str, candidate: str | None) -> dict | None:
        with self._lock:
            self.calls += 1
            self.log.append({"kind": kind, "fingerprint": fp})
            for i, rule in enumerate(self.rules):
                if rule.get("kind", "any") not in ("any", kind):
                    continue
                if "fingerprint" in rule and rule["fingerprint"] != fp:
                    continue
                needles = rule.get("contains", [])
                if isinstance(needles, str):
                    needles = [needles]
                if any(n not in text for n in needles):
                    continue
                if "candidate" in rule and rule["candidate"] != candidate:
                    continue
                seq = rule.get("responses") or [rule.get("response")]
                outcome = seq[min(self._counters[i], len(seq) - 1)]
                self._counters[i] += 1
                return outcome
        default_key = "default_continuation" if kind == "continuation" else "default"
        return self.script.get(default_key, self.script.get("default"))

    @staticmethod
    def _raise_if_error(outcome: dict) -> None:
        err = outcome.get("error")
        if err:
            factory = _ERRORS.get(err)
            if factory is None:
                raise ProviderError(f"scripted error {err}", code=err)
            raise factory()

    def chat(self, request: ChatRequest) -> ProviderReply:
        outcome = self._match("chat", request.prompt_text, chat_fingerprint(request), None)
        if outcome is None:
            raise ProviderError("no scripted response for request", code="unscripted")
        self._raise_if_error(outcome)
        if "json" in outcome:
            text = canonical_json(outcome["json"])
        elif "text" in outcome:
            text = outcome["text"]
        else:
            raise ProviderError("scripted chat outcome has no text/json", code="bad_script")
        return ProviderReply(text, outcome.get("finish_reason", "stop"), int(outcome.get("latency_ms", 0)))

    def token_logprobs(self, model: str, prefix: str, candidate: str) -> TokenLogprobs:
        outcome = self._match("continuation", prefix, continuation_fingerprint(prefix, candidate), candidate)
        if outcome is None:
            raise UnsupportedProvider("script has no continuation scores")
        self._raise_if_error(outcome)
        if "logprobs" not in outcome:
            raise UnsupportedProvider("scripted outcome has no logprobs")
        return TokenLogprobs(tuple(float(x) for x in outcome["logprobs"]), int(outcome.get("latency_ms", 0)))


class CallableProvider:
    """Provider backed by plain Python callables (for programmatic mocks)."""

    def __init__(self, chat_fn: Callable[[ChatRequest], str] | None = None,
                 logprob_fn: Callable[[str, str], list[float]] | None = None):
        self.chat_fn = chat_fn
        self.logprob_fn = logprob_fn
        self.calls = 0
        self._lock = threading.Lock()

    def _tick(self):
        with self._lock:
            self.calls += 1

    def chat(self, request: ChatRequest) -> ProviderReply:
        self._tick()
        if self.chat_fn is None:
            raise ProviderError("no chat function", code="unscripted")
        return ProviderReply(self.chat_fn(request), "stop", 0)

    def token_logprobs(self, model: str, prefix: str, candidate: str) -> TokenLogprobs:
        self._tick()
        if self.logprob_fn is None:
            raise UnsupportedProvider("no logprob function")
        return TokenLogprobs(tuple(self.logprob_fn(prefix, candidate)), 0)


class CallableTranslator:
    def __init__(self, fn: Callable[[str, str, str], str]):
        self.fn = fn

    def translate_one(self, text: str, source_lang: str, target_lang: str) -> str:
        return self.fn(text, source_lang, target_lang)
