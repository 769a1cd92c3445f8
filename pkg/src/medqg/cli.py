"""``medqg`` command-line entry point.

Each command reads its inputs from the run config, writes its outputs and a
manifest at ``<reports_out>/manifests/<command>.json``.  Manifests carry the
config fingerprint, the seed, sha256 digests of inputs and outputs, and
counts.  ``generate`` and ``evaluate`` keep a journal of finished units under
``<reports_out>/state`` so an interrupted or repeated run only queries the
provider for what is missing.

Exit codes: 0 success, 1 pipeline error (JSON on stderr), 2 config/usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import threading
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from ._io import canonical_json, dumps_line, file_digest, fingerprint, iter_jsonl, write_json, write_jsonl
from .config import ConfigError, RunConfig, load_config
from .corpus import (
    SectionSegmenter,
    corpus_stats,
    normalize_section_lengths,
    load_documents,
    read_sections,
    write_sections,
    write_stats,
)
from .evalharness import EvalConfig, EvalReport, Evaluator, PredictionRecord, evaluate
from .exporter import export_case_sft, export_classification, export_pretrain, write_export
from .generator import (
    DefectReport,
    GeneratedCase,
    PromptTemplate,
    build_generation_prompt,
    filter_cases,
    generate_cases,
    read_cases,
    round_robin,
    write_cases,
)
from .llmclient import LLMClient, Provider, RetryPolicy, make_provider
from .qadata import parse_dataset, split_dataset, to_eval_items, write_dataset
from .tokenization import get_tokenizer

log = logging.getLogger("medqg")

COMMANDS = ("ingest", "segment", "stats", "generate", "validate", "split", "evaluate", "export", "report")


# ---------------------------------------------------------------------------
# run context

class Run:
    """Per-invocation state: config, derived paths, digests for the manifest."""

    def __init__(self, command: str, cfg: RunConfig, provider: Provider | None = None):
        self.command = command
        self.cfg = cfg
        self._provider = provider
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.counts: dict = {}
        self.extra: dict = {}
        self._calls0 = int(getattr(provider, "calls", 0) or 0)

    # paths ----------------------------------------------------------------

    @property
    def reports(self) -> Path:
        return self.cfg.path("reports_out")

    def ingested_path(self) -> Path:
        p = self.cfg.path("sections_out")
        return p.with_name(p.stem + ".ingested.jsonl")

    def valid_cases_path(self) -> Path:
        p = self.cfg.path("cases_out")
        return p.with_name(p.stem + ".valid.jsonl")

    def state_path(self) -> Path:
        return self.reports / "state" / f"{self.command}.jsonl"

    def need(self, key: str) -> Path:
        self.cfg.require(key)
        return self.cfg.path(key)

    def need_input(self, key: str, path: Path | None = None) -> Path:
        p = path if path is not None else self.need(key)
        if not p.exists():
            raise ConfigError(f"input path for {key!r} does not exist: {p}", key)
        return p

    # bookkeeping -----------------------------------------------------------

    def _rel(self, p: Path) -> str:
        try:
            return os.path.relpath(p, self.cfg.base_dir)
        except ValueError:
            return str(p)

    def record_input(self, p: Path) -> None:
        files = sorted(p.glob("*.json")) if p.is_dir() else [p]
        for f in files:
            self.inputs[self._rel(f)] = file_digest(f)

    def record_output(self, p: Path) -> None:
        self.outputs[self._rel(p)] = file_digest(p)

    def client(self, temperature: float, max_tokens: int) -> LLMClient:
        self.cfg.require("endpoint", "model")
        if self._provider is None:
            self._provider = make_provider(self.cfg.resolved_endpoint())
        retry = RetryPolicy(**self.cfg.retry)
        return LLMClient(self._provider, self.cfg.model, temperature=temperature, max_tokens=max_tokens,
                         retry=retry, concurrency=self.cfg.concurrency,
                         requests_per_second=self.cfg.requests_per_second)

    def calls_so_far(self) -> int:
        return int(getattr(self._provider, "calls", 0) or 0) - self._calls0

    def write_manifest(self) -> Path:
        path = self.reports / "manifests" / f"{self.command}.json"
        write_json(path, {
            "command": self.command,
            "version": __version__,
            "config_fingerprint": self.cfg.fingerprint,
            "seed": self.cfg.seed,
            "config": self.cfg.as_dict(),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "counts": self.counts,
            **self.extra,
        })
        return path


class Journal:
    """Append-only record of finished units, valid only for one resume key."""

    def __init__(self, path: Path, resume_key: str):
        self.path = path
        self.resume_key = resume_key
        self._lock = threading.Lock()

    def load(self) -> dict[str, dict]:
        if not self.path.exists():
            return {}
        done: dict[str, dict] = {}
        try:
            rows = [obj for _, obj in iter_jsonl(self.path)]
        except json.JSONDecodeError:
            # a torn last line from a killed run; keep what parses
            rows = []
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    try:
                        rows.append(json.loads(line))
                    except json.JSONDecodeError:
                        break
        if not rows or rows[0].get("resume_key") != self.resume_key:
            return {}
        for row in rows[1:]:
            done[row["unit"]] = row
        return done

    def start(self, done: dict[str, dict]) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", encoding="utf-8") as fh:
            fh.write(dumps_line({"resume_key": self.resume_key}))
            for row in done.values():
                fh.write(dumps_line(row))

    def append(self, row: dict) -> None:
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(dumps_line(row))
            fh.flush()


# ---------------------------------------------------------------------------
# commands

def _segmenter(cfg: RunConfig) -> SectionSegmenter:
    return SectionSegmenter(cfg.min_chars, cfg.header_repeat_threshold, cfg.min_words, cfg.max_words,
                            get_tokenizer(cfg.tokenizer)).fit()


def cmd_ingest(run: Run) -> dict:
    corpus = run.need_input("corpus_in")
    run.need("sections_out")
    run.record_input(corpus)
    docs = load_documents(corpus)
    sections = _segmenter(run.cfg).group(docs)
    out = run.ingested_path()
    write_sections(out, sections)
    run.record_output(out)
    run.counts = {"documents": len(docs), "sections": len(sections)}
    return run.counts


def cmd_segment(run: Run) -> dict:
    out = run.need("sections_out")
    seg = _segmenter(run.cfg)
    grouped = run.ingested_path()
    if grouped.exists():
        run.record_input(grouped)
        sections = normalize_section_lengths(read_sections(grouped), run.cfg.min_words, run.cfg.max_words,
                                             seg.tokenizer)
    else:
        corpus = run.need_input("corpus_in")
        run.record_input(corpus)
        sections = seg.transform(load_documents(corpus))
    write_sections(out, sections)
    run.record_output(out)
    stats = corpus_stats(sections, run.cfg.min_words)
    run.counts = stats.to_dict()
    return run.counts


def cmd_stats(run: Run) -> dict:
    sections_path = run.need_input("sections_out")
    run.record_input(sections_path)
    stats = corpus_stats(read_sections(sections_path), run.cfg.min_words)
    out = run.reports / "corpus_stats.json"
    write_stats(out, stats, config_fingerprint=run.cfg.fingerprint)
    run.record_output(out)
    run.counts = stats.to_dict()
    return run.counts


def _template(cfg: RunConfig) -> PromptTemplate:
    kwargs = {}
    if cfg.pre_prompt is not None:
        kwargs["pre_prompt"] = cfg.pre_prompt
    if cfg.constitution is not None:
        kwargs["constitution"] = tuple(cfg.constitution)
    tpath = cfg.path("template")
    if tpath is not None:
        if not tpath.exists():
            raise ConfigError(f"input path for 'template' does not exist: {tpath}", "template")
        return PromptTemplate.from_file(tpath, **kwargs)
    return PromptTemplate(**kwargs)


def _write_filtered(run: Run, cases: list[GeneratedCase], upstream: list[DefectReport]) -> dict:
    summary = filter_cases(cases, repair=run.cfg.repair, threshold=run.cfg.dedupe_threshold)
    valid_path = run.valid_cases_path()
    write_cases(valid_path, summary.kept)
    defects_path = run.reports / "defects.jsonl"
    reports = list(upstream) + summary.defect_reports
    write_jsonl(defects_path, (r.to_dict() for r in reports))
    run.record_output(valid_path)
    run.record_output(defects_path)
    return {**summary.counts, "defect_reports": len(reports)}


def cmd_generate(run: Run) -> dict:
    sections_path = run.need_input("sections_out")
    cases_path = run.need("cases_out")
    cfg = run.cfg
    template = _template(cfg)
    client = run.client(cfg.generation_temperature, cfg.generation_max_tokens)
    run.record_input(sections_path)

    sections = round_robin(read_sections(sections_path))
    if cfg.max_sections is not None:
        sections = sections[:cfg.max_sections]
    prompts = [build_generation_prompt(s, template) for s in sections]

    resume_key = fingerprint({
        "sections": file_digest(sections_path), "endpoint": cfg.endpoint, "model": cfg.model,
        "temperature": cfg.generation_temperature, "max_tokens": cfg.generation_max_tokens,
        "max_retries": cfg.max_retries, "template_hash": template.template_hash,
    })
    journal = Journal(run.state_path(), resume_key)
    done = journal.load()
    journal.start(done)
    todo = [p for p in prompts if p.section_id not in done]
    log.info("generate: %d sections, %d already done", len(prompts), len(prompts) - len(todo))

    def work(prompt):
        res = generate_cases(prompt, client, cfg.max_retries, cfg.generation_temperature, cfg.generation_max_tokens)
        row = {
            "unit": prompt.section_id, "status": res.status, "attempts": res.attempts,
            "cases": [c.to_dict() for c in res.cases], "defects": [d.to_dict() for d in res.defects],
        }
        journal.append(row)
        return row

    fresh = client.map(work, todo, key=lambda p: p.section_id, workers=cfg.concurrency)
    done.update(fresh)

    cases: list[GeneratedCase] = []
    upstream: list[DefectReport] = []
    units = {}
    for p in prompts:
        row = done[p.section_id]
        cs = [GeneratedCase.from_dict(c) for c in row["cases"]]
        cases.extend(cs)
        upstream.extend(DefectReport.from_dict(d) for d in row["defects"])
        units[p.section_id] = {"status": row["status"], "attempts": row["attempts"],
                               "case_ids": [c.case_id for c in cs]}
    write_cases(cases_path, cases)
    run.record_output(cases_path)
    run.extra["units"] = units
    run.extra["template_hash"] = template.template_hash
    run.counts = {"sections": len(prompts), "skipped": len(prompts) - len(todo),
                  "blocked": sum(u["status"] == "blocked" for u in units.values()),
                  "parse_error": sum(u["status"] == "parse_error" for u in units.values()),
                  **_write_filtered(run, cases, upstream)}
    return run.counts


def cmd_validate(run: Run) -> dict:
    cases_path = run.need_input("cases_out")
    run.record_input(cases_path)
    run.counts = _write_filtered(run, read_cases(cases_path), [])
    return run.counts


def cmd_split(run: Run) -> dict:
    src = run.need_input("dataset_in")
    run.record_input(src)
    ds = parse_dataset(src)
    train, test = split_dataset(ds, run.cfg.test_fraction, run.cfg.seed)
    out = run.reports / "split"
    for name, part in (("train", train), ("test", test)):
        write_dataset(out / f"{name}.jsonl", part)
        run.record_output(out / f"{name}.jsonl")
    run.counts = {"train_questions": train.question_count, "test_questions": test.question_count,
                  "train_cases": len(train.pq), "test_cases": len(test.pq)}
    return run.counts


def _eval_dataset_path(run: Run) -> tuple[str, Path]:
    key = "eval_dataset" if run.cfg.eval_dataset else "dataset_in"
    return key, run.need_input(key)


def _train_dataset_path(run: Run) -> Path:
    if run.cfg.train_dataset:
        return run.need_input("train_dataset")
    p = run.reports / "split" / "train.jsonl"
    if p.exists():
        return p
    raise ConfigError("few-shot evaluation needs 'train_dataset' (or a prior split run)", "train_dataset")


def cmd_evaluate(run: Run) -> dict:
    cfg = run.cfg
    _, ds_path = _eval_dataset_path(run)
    client = run.client(cfg.temperature, cfg.max_tokens)
    run.record_input(ds_path)
    econf = EvalConfig(cfg.model, cfg.evaluator, cfg.context_policy, cfg.seed, cfg.k_shots,
                       cfg.concurrency, cfg.temperature, cfg.max_tokens)
    items = to_eval_items(parse_dataset(ds_path), econf.context_policy)
    exemplars = []
    if econf.evaluator is Evaluator.FEW_SHOT:
        train_path = _train_dataset_path(run)
        run.record_input(train_path)
        exemplars = to_eval_items(parse_dataset(train_path), econf.context_policy)

    resume_key = fingerprint({
        "eval": econf.fingerprint, "dataset": file_digest(ds_path), "endpoint": cfg.endpoint,
        "k_shots": cfg.k_shots, "exemplars": [e.item_id for e in exemplars],
    })
    journal = Journal(run.state_path(), resume_key)
    done_rows = journal.load()
    journal.start(done_rows)
    done = {k: PredictionRecord.from_dict(v["record"]) for k, v in done_rows.items()}

    def on_record(rec: PredictionRecord) -> None:
        journal.append({"unit": rec.item_id, "record": rec.to_dict()})

    report = evaluate(items, econf.evaluator, client, econf, exemplars, done, on_record)
    out = run.reports / "eval_report.json"
    write_json(out, report.to_dict())
    run.record_output(out)
    statuses = [r.status for r in report.records]
    run.counts = {"items": len(items), "questions": len(report.question_scores), "skipped": len(done),
                  "ok": statuses.count("ok"), "blocked": statuses.count("blocked"),
                  "unparseable": statuses.count("unparseable")}
    run.extra["eval_fingerprint"] = report.config_fingerprint
    run.extra["overall_accuracy"] = report.overall_accuracy
    return {**run.counts, "overall_accuracy": report.overall_accuracy}


def cmd_export(run: Run) -> dict:
    cfg = run.cfg
    kind = cfg.export_kind
    tok = get_tokenizer(cfg.tokenizer)
    if kind == "pretrain":
        src = run.need_input("sections_out")
        records, meta = export_pretrain(read_sections(src), cfg.epochs or 3, tok)
    elif kind == "case_sft":
        run.need("cases_out")
        src = run.valid_cases_path()
        if not src.exists():
            src = run.need_input("cases_out")
        records, meta = export_case_sft(read_cases(src), cfg.context_limit, tok,
                                        cfg.include_choice_text, cfg.drop_tail_questions)
        if cfg.epochs is not None:
            meta["epochs"] = meta["recommended_training"]["epochs"] = cfg.epochs
    else:
        if cfg.train_dataset:
            src = run.need_input("train_dataset")
        else:
            src = run.reports / "split" / "train.jsonl"
            if not src.exists():
                src = run.need_input("dataset_in")
        records, meta = export_classification(parse_dataset(src), cfg.context_policy)
        if cfg.epochs is not None:
            meta["epochs"] = meta["recommended_training"]["epochs"] = cfg.epochs
    run.record_input(src)
    meta["config_fingerprint"] = cfg.fingerprint
    data_path, meta_path = write_export(run.reports / "export", kind, records, meta)
    run.record_output(Path(data_path))
    run.record_output(Path(meta_path))
    run.counts = meta["counts"]
    run.extra["kind"] = kind
    return {"kind": kind, **run.counts}


def cmd_report(run: Run) -> dict:
    src = run.need_input("reports_out", run.reports / "eval_report.json")
    run.record_input(src)
    report = EvalReport.from_dict(json.loads(src.read_text(encoding="utf-8")))
    summary = {
        "overall_accuracy": report.overall_accuracy,
        "histogram": report.histogram,
        "per_subject": report.per_subject,
        "config_fingerprint": report.config_fingerprint,
        "question_count": len(report.question_scores),
    }
    if run.cfg.report_format == "json":
        out = run.reports / "summary.json"
        write_json(out, summary)
        run.record_output(out)
    else:
        for name, body in (("histogram.csv", report.histogram_csv()),
                           ("per_subject.csv", report.per_subject_csv())):
            (run.reports / name).write_text(body, encoding="utf-8")
            run.record_output(run.reports / name)
    run.counts = {"questions": len(report.question_scores)}
    return summary


HANDLERS: dict[str, Callable[[Run], dict]] = {
    "ingest": cmd_ingest, "segment": cmd_segment, "stats": cmd_stats, "generate": cmd_generate,
    "validate": cmd_validate, "split": cmd_split, "evaluate": cmd_evaluate, "export": cmd_export,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--reports-out", dest="reports_out")
    common.add_argument("--seed", type=int)
    common.add_argument("--endpoint")
    common.add_argument("--model")
    common.add_argument("--concurrency", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="medqg", description="Medical QA data pipeline: segment, generate, evaluate, export.")
    parser.add_argument("--version", action="version", version=f"medqg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("ingest", parents=[common], help="filter and group extracted documents")
    p = sub.add_parser("segment", parents=[common], help="normalize sections to the word bounds")
    p.add_argument("--min-words", type=int, dest="min_words")
    p.add_argument("--max-words", type=int, dest="max_words")
    sub.add_parser("stats", parents=[common], help="corpus statistics")

    filt = argparse.ArgumentParser(add_help=False)
    filt.add_argument("--dedupe-threshold", type=float, dest="dedupe_threshold")
    filt.add_argument("--repair", action="store_true", default=None)
    p = sub.add_parser("generate", parents=[common, filt], help="generate clinical cases from sections")
    p.add_argument("--template", help="prompt layout file")
    p.add_argument("--max-sections", type=int, dest="max_sections")
    sub.add_parser("validate", parents=[common, filt], help="validate, repair and dedupe generated cases")

    p = sub.add_parser("split", parents=[common], help="seeded train/test split")
    p.add_argument("--test-fraction", type=float, dest="test_fraction")

    p = sub.add_parser("evaluate", parents=[common], help="score an endpoint on a dataset")
    p.add_argument("--evaluator", choices=[e.value for e in Evaluator])
    p.add_argument("--k-shots", type=int, dest="k_shots")
    p.add_argument("--context-policy", dest="context_policy",
                   choices=["stem_only", "intro_plus_stems", "intro_stems_and_gold"])
    p.add_argument("--dataset", dest="eval_dataset")

    p = sub.add_parser("export", parents=[common], help="write a training corpus")
    p.add_argument("--kind", dest="export_kind", choices=["pretrain", "case_sft", "classification"])
    p.add_argument("--context-limit", type=int, dest="context_limit")
    p.add_argument("--epochs", type=int)
    p.add_argument("--include-choice-text", action="store_true", default=None, dest="include_choice_text")
    p.add_argument("--drop-tail-questions", action="store_true", default=None, dest="drop_tail_questions")
    p.add_argument("--context-policy", dest="context_policy",
                   choices=["stem_only", "intro_plus_stems", "intro_stems_and_gold"])

    p = sub.add_parser("report", parents=[common], help="summaries from an evaluation report")
    p.add_argument("--format", dest="report_format", choices=["json", "csv"])
    return parser


def _fail(code: int, exc: BaseException, command: str | None) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "command": command}
    key = getattr(exc, "key", None)
    if key:
        err["key"] = key
    sys.stderr.write(canonical_json(err) + "\n")
    return code


def main(argv: Sequence[str] | None = None, provider: Provider | None = None) -> int:
    """Run one command; ``provider`` overrides the configured endpoint (tests)."""
    command = None
    try:
        try:
            args = build_parser().parse_args(argv)
        except SystemExit as exc:  # --help / --version
            return int(exc.code or 0)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        overrides = {k: v for k, v in vars(args).items() if k not in ("config", "command", "verbose")}
        cfg = load_config(args.config, overrides)
        run = Run(command, cfg, provider)
        result = HANDLERS[command](run)
        manifest = run.write_manifest()
    except ConfigError as exc:
        return _fail(2, exc, command)
    except Exception as exc:  # noqa: BLE001 - every pipeline failure becomes exit 1
        log.debug("pipeline error", exc_info=True)
        return _fail(1, exc, command)
    summary = {"command": command, "config_fingerprint": cfg.fingerprint, "manifest": str(manifest),
               "provider_calls": run.calls_so_far(), **result}
    sys.stdout.write(canonical_json(summary) + "\n")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
