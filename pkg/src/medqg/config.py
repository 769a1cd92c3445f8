"""Run configuration: one JSON file, overridden by command-line flags.

Keys may be given flat or grouped under ``paths``, ``client`` and
``pipeline``; retry settings live under ``retry``.  Relative paths are
resolved against the config file's directory (or the working directory
when no file is used).  Credentials never go in the file: the API key is
read from ``LLM_API_KEY``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ._io import fingerprint
from .evalharness import Evaluator
from .qadata import ContextPolicy

PATH_KEYS = ("corpus_in", "sections_out", "dataset_in", "cases_out", "reports_out",
             "eval_dataset", "train_dataset", "template")

# key -> (type, default)
SCHEMA: dict[str, tuple[type | tuple, Any]] = {
    # paths
    "corpus_in": (str, None),
    "sections_out": (str, None),
    "dataset_in": (str, None),
    "cases_out": (str, None),
    "reports_out": (str, "reports"),
    "eval_dataset": (str, None),
    "train_dataset": (str, None),
    "template": (str, None),
    # client
    "endpoint": (str, None),
    "model": (str, None),
    "concurrency": (int, 4),
    "temperature": ((int, float), 0.0),
    "generation_temperature": ((int, float), 1.0),
    "max_tokens": (int, 8),
    "generation_max_tokens": (int, 4096),
    "requests_per_second": ((int, float, type(None)), None),
    "retry": (dict, {"max_attempts": 5, "base_delay_ms": 500}),
    # pipeline knobs
    "min_chars": (int, 20),
    "header_repeat_threshold": (int, 3),
    "min_words": (int, 500),
    "max_words": (int, 1000),
    "tokenizer": (str, "default"),
    "context_policy": (str, ContextPolicy.INTRO_STEMS_AND_GOLD.value),
    "evaluator": (str, Evaluator.ZERO_SHOT.value),
    "k_shots": (int, 5),
    "seed": (int, 0),
    "test_fraction": ((int, float), 0.1),
    "context_limit": (int, 2048),
    "epochs": ((int, type(None)), None),
    "dedupe_threshold": ((int, float), 0.8),
    "repair": (bool, False),
    "max_retries": (int, 2),
    "max_sections": ((int, type(None)), None),
    "export_kind": (str, "pretrain"),
    "include_choice_text": (bool, False),
    "drop_tail_questions": (bool, False),
    "report_format": (str, "json"),
    "pre_prompt": ((str, type(None)), None),
    "constitution": ((list, type(None)), None),
}

CHOICES = {
    "context_policy": [p.value for p in ContextPolicy],
    "evaluator": [e.value for e in Evaluator],
    "export_kind": ["pretrain", "case_sft", "classification"],
    "report_format": ["json", "csv"],
}

_GROUPS = ("paths", "client", "pipeline")
_RETRY_KEYS = ("max_attempts", "base_delay_ms", "max_delay_ms", "multiplier")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(message)


@dataclass
class RunConfig:
    values: dict
    base_dir: Path = field(default_factory=Path.cwd)

    def __getattr__(self, name: str):
        values = self.__dict__.get("values", {})
        if name in values:
            return values[name]
        raise AttributeError(name)

    def path(self, key: str) -> Path | None:
        v = self.values.get(key)
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else (self.base_dir / p)

    def resolved_endpoint(self) -> str | None:
        ep = self.values.get("endpoint")
        if ep and ep.startswith("mock://"):
            script = Path(ep[len("mock://"):])
            if not script.is_absolute():
                script = self.base_dir / script
            return f"mock://{script}"
        return ep

    def require(self, *keys: str) -> None:
        for key in keys:
            if self.values.get(key) in (None, ""):
                raise ConfigError(f"missing config key {key!r}", key)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.values)

    def as_dict(self) -> dict:
        return dict(self.values)


def _flatten(raw: dict) -> dict:
    flat: dict = {}
    for k, v in raw.items():
        if k in _GROUPS:
            if not isinstance(v, dict):
                raise ConfigError(f"config group {k!r} must be an object", k)
            flat.update(v)
        else:
            flat[k] = v
    return flat


def _check(values: dict) -> dict:
    out = {}
    for key, value in values.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}", key)
        typ, _ = SCHEMA[key]
        if value is not None or type(None) in (typ if isinstance(typ, tuple) else (typ,)):
            if value is not None and (not isinstance(value, typ) or (isinstance(value, bool) and typ in (int, (int, float)))):
                raise ConfigError(f"config key {key!r} has the wrong type ({type(value).__name__})", key)
        if key in CHOICES and value not in CHOICES[key]:
            raise ConfigError(f"config key {key!r} must be one of {CHOICES[key]}, got {value!r}", key)
        out[key] = value
    retry = out.get("retry")
    if retry is not None:
        for rk in retry:
            if rk not in _RETRY_KEYS:
                raise ConfigError(f"unknown config key 'retry.{rk}'", f"retry.{rk}")
    if "min_words" in out or "max_words" in out:
        lo = out.get("min_words", SCHEMA["min_words"][1])
        hi = out.get("max_words", SCHEMA["max_words"][1])
        if not 0 < lo < hi:
            raise ConfigError("need 0 < min_words < max_words", "min_words")
    return out


def load_config(path: str | os.PathLike | None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the config file, then non-None *overrides* (CLI flags)."""
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        p = Path(path)
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {p}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        base = p.resolve().parent
    values = {k: (dict(d) if isinstance(d, dict) else d) for k, (_, d) in SCHEMA.items()}
    values.update(_check(_flatten(raw)))
    flags = {k: v for k, v in (overrides or {}).items() if v is not None}
    values.update(_check(flags))
    if isinstance(values.get("retry"), dict):
        values["retry"] = {**SCHEMA["retry"][1], **values["retry"]}
    return RunConfig(values, base)
