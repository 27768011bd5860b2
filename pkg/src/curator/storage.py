"""Reading and writing the pipeline's serialized formats.

Everything on disk is UTF-8 JSON: datasets are JSON-lines (one object per
line, schema version 1), manifests and evaluation reports are single JSON
objects. Serialization is deterministic -- fixed key order, compact
separators -- so identical inputs produce byte-identical files.

On load the trace text is authoritative: answer and parse status are
re-derived from it rather than trusted from the file.
"""

from __future__ import annotations

import json
import sys
from contextlib import contextmanager
from typing import Any, Iterable, Iterator, TextIO

from .errors import JsonlFormatError
from .model import (
    LABEL_ORDER,
    ClassLabel,
    DatasetManifest,
    QueryTuple,
    ReasoningTrace,
    SamplingParams,
    ScoredExample,
    TraceBundle,
    UncertaintyScores,
    make_trace,
    parse_class_label,
)

SCHEMA_VERSION = 1

_BUNDLE_KEYS = {"v", "query", "greedy", "samples", "scores"}
_QUERY_KEYS = {"id", "cell_type", "perturbation", "gene", "gold_label"}
_TRACE_KEYS = {"text", "answer", "logprobs", "sampling"}
_SAMPLING_KEYS = {"temperature", "top_p", "top_k", "seed"}
_SCORE_KEYS = {"ppl", "inconsistency", "cocoa"}


def dumps(obj: Any) -> str:
    """Canonical single-line JSON used for all dataset rows."""
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


@contextmanager
def open_input(path: str) -> Iterator[TextIO]:
    """Open a text input; '-' means standard input."""
    if path == "-":
        yield sys.stdin
    else:
        with open(path, "r", encoding="utf-8") as fh:
            yield fh


@contextmanager
def open_output(path: str) -> Iterator[TextIO]:
    """Open a text output; '-' means standard output."""
    if path == "-":
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8") as fh:
            yield fh


def sampling_to_dict(p: SamplingParams) -> dict:
    out: dict[str, Any] = {"temperature": p.temperature, "top_p": p.top_p, "top_k": p.top_k}
    if p.seed is not None:
        out["seed"] = p.seed
    return out


def trace_to_dict(t: ReasoningTrace) -> dict:
    out: dict[str, Any] = {"text": t.text}
    if t.answer is not None:
        out["answer"] = t.answer.value
    if t.token_logprobs is not None:
        out["logprobs"] = list(t.token_logprobs)
    out["sampling"] = sampling_to_dict(t.sampling)
    return out


def query_to_dict(q: QueryTuple) -> dict:
    out: dict[str, Any] = {
        "id": q.id,
        "cell_type": q.cell_type,
        "perturbation": q.perturbation,
        "gene": q.gene,
    }
    if q.gold_label is not None:
        out["gold_label"] = q.gold_label.value
    return out


def bundle_to_record(bundle: TraceBundle, scores: UncertaintyScores | None = None) -> dict:
    rec: dict[str, Any] = {
        "v": SCHEMA_VERSION,
        "query": query_to_dict(bundle.query),
        "greedy": trace_to_dict(bundle.greedy),
        "samples": [trace_to_dict(t) for t in bundle.samples],
    }
    if scores is not None:
        rec["scores"] = {
            "ppl": scores.ppl,
            "inconsistency": scores.inconsistency,
            "cocoa": scores.cocoa,
        }
    return rec


def scored_to_record(ex: ScoredExample) -> dict:
    return bundle_to_record(ex.bundle, ex.scores)


class _Ctx:
    """Carries path/line info so schema errors point at the failing line."""

    def __init__(self, path: str, lineno: int):
        self.path = path
        self.lineno = lineno

    def fail(self, message: str) -> JsonlFormatError:
        return JsonlFormatError(self.path, self.lineno, message)

    def require_obj(self, value: Any, what: str) -> dict:
        if not isinstance(value, dict):
            raise self.fail(f"{what} must be a JSON object")
        return value

    def check_keys(self, obj: dict, allowed: set[str], required: set[str], what: str) -> None:
        unknown = set(obj) - allowed
        if unknown:
            raise self.fail(f"unknown {what} keys: {sorted(unknown)}")
        missing = required - set(obj)
        if missing:
            raise self.fail(f"missing {what} keys: {sorted(missing)}")


def _sampling_from_dict(obj: Any, ctx: _Ctx) -> SamplingParams:
    obj = ctx.require_obj(obj, "sampling")
    ctx.check_keys(obj, _SAMPLING_KEYS, {"temperature", "top_p", "top_k"}, "sampling")
    try:
        return SamplingParams(
            temperature=float(obj["temperature"]),
            top_p=float(obj["top_p"]),
            top_k=None if obj["top_k"] is None else int(obj["top_k"]),
            seed=None if obj.get("seed") is None else int(obj["seed"]),
        )
    except (TypeError, ValueError) as exc:
        raise ctx.fail(f"bad sampling params: {exc}") from None


def _trace_from_dict(obj: Any, ctx: _Ctx) -> ReasoningTrace:
    obj = ctx.require_obj(obj, "trace")
    ctx.check_keys(obj, _TRACE_KEYS, {"text", "sampling"}, "trace")
    text = obj["text"]
    if not isinstance(text, str):
        raise ctx.fail("trace text must be a string")
    logprobs = obj.get("logprobs")
    if logprobs is not None:
        if not isinstance(logprobs, list) or any(
            isinstance(v, bool) or not isinstance(v, (int, float)) for v in logprobs
        ):
            raise ctx.fail("trace logprobs must be a list of numbers")
        logprobs = tuple(float(v) for v in logprobs)
    sampling = _sampling_from_dict(obj["sampling"], ctx)
    try:
        return make_trace(text, sampling, logprobs)
    except ValueError as exc:
        raise ctx.fail(str(exc)) from None


def _query_from_dict(obj: Any, ctx: _Ctx) -> QueryTuple:
    obj = ctx.require_obj(obj, "query")
    ctx.check_keys(obj, _QUERY_KEYS, {"id", "cell_type", "perturbation", "gene"}, "query")
    gold = obj.get("gold_label")
    try:
        return QueryTuple(
            id=str(obj["id"]),
            cell_type=str(obj["cell_type"]),
            perturbation=str(obj["perturbation"]),
            gene=str(obj["gene"]),
            gold_label=None if gold is None else parse_class_label(str(gold)),
        )
    except Exception as exc:
        raise ctx.fail(f"bad query: {exc}") from None


def record_to_bundle(rec: Any, ctx: _Ctx) -> tuple[TraceBundle, UncertaintyScores | None]:
    rec = ctx.require_obj(rec, "record")
    ctx.check_keys(rec, _BUNDLE_KEYS, {"v", "query", "greedy", "samples"}, "record")
    if rec["v"] != SCHEMA_VERSION:
        raise ctx.fail(f"unsupported schema version {rec['v']!r}")
    query = _query_from_dict(rec["query"], ctx)
    greedy = _trace_from_dict(rec["greedy"], ctx)
    if not isinstance(rec["samples"], list):
        raise ctx.fail("samples must be a list")
    samples = tuple(_trace_from_dict(t, ctx) for t in rec["samples"])
    try:
        bundle = TraceBundle(query=query, greedy=greedy, samples=samples)
    except ValueError as exc:
        raise ctx.fail(str(exc)) from None
    scores = None
    if "scores" in rec:
        sobj = ctx.require_obj(rec["scores"], "scores")
        ctx.check_keys(sobj, _SCORE_KEYS, _SCORE_KEYS, "scores")
        try:
            scores = UncertaintyScores(
                ppl=None if sobj["ppl"] is None else float(sobj["ppl"]),
                inconsistency=float(sobj["inconsistency"]),
                cocoa=None if sobj["cocoa"] is None else float(sobj["cocoa"]),
            )
        except (TypeError, ValueError) as exc:
            raise ctx.fail(f"bad scores: {exc}") from None
    return bundle, scores


def _iter_json_lines(fh: TextIO, path: str) -> Iterator[tuple[_Ctx, Any]]:
    seen_ids: set[str] = set()
    for lineno, line in enumerate(fh, start=1):
        if not line.strip():
            continue
        ctx = _Ctx(path, lineno)
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ctx.fail(f"invalid JSON: {exc}") from None
        if isinstance(obj, dict):
            query = obj.get("query")
            qid = query.get("id") if isinstance(query, dict) else obj.get("id")
            if isinstance(qid, str):
                if qid in seen_ids:
                    raise ctx.fail(f"duplicate query id {qid!r}")
                seen_ids.add(qid)
        yield ctx, obj


def _read_records_ctx(path: str) -> Iterator[tuple[_Ctx, TraceBundle, UncertaintyScores | None]]:
    with open_input(path) as fh:
        for ctx, obj in _iter_json_lines(fh, path):
            bundle, scores = record_to_bundle(obj, ctx)
            yield ctx, bundle, scores


def read_records(path: str) -> Iterator[tuple[TraceBundle, UncertaintyScores | None]]:
    """Stream (bundle, scores) pairs from a bundle or scored JSONL file."""
    for _, bundle, scores in _read_records_ctx(path):
        yield bundle, scores


def read_bundles(path: str) -> Iterator[TraceBundle]:
    for bundle, _ in read_records(path):
        yield bundle


def read_scored(path: str) -> Iterator[ScoredExample]:
    """Stream ScoredExamples; every line must carry a scores object."""
    for ctx, bundle, scores in _read_records_ctx(path):
        if scores is None:
            raise ctx.fail("line has no scores object")
        try:
            yield ScoredExample(bundle=bundle, scores=scores)
        except ValueError as exc:
            raise ctx.fail(str(exc)) from None


def write_bundles(path: str, bundles: Iterable[TraceBundle]) -> int:
    n = 0
    with open_output(path) as fh:
        for bundle in bundles:
            fh.write(dumps(bundle_to_record(bundle)) + "\n")
            n += 1
    return n


def write_scored(path: str, scored: Iterable[ScoredExample]) -> int:
    n = 0
    with open_output(path) as fh:
        for ex in scored:
            fh.write(dumps(scored_to_record(ex)) + "\n")
            n += 1
    return n


def read_queries(path: str) -> Iterator[QueryTuple]:
    """Stream queries from a JSONL file of query objects."""
    with open_input(path) as fh:
        for ctx, obj in _iter_json_lines(fh, path):
            yield _query_from_dict(obj, ctx)


def write_queries(path: str, queries: Iterable[QueryTuple]) -> int:
    n = 0
    with open_output(path) as fh:
        for q in queries:
            fh.write(dumps(query_to_dict(q)) + "\n")
            n += 1
    return n


def manifest_to_dict(m: DatasetManifest) -> dict:
    out: dict[str, Any] = {
        "source_path": m.source_path,
        "n_examples": m.n_examples,
        "class_counts": {
            label.value: m.class_counts.get(label, 0) for label in LABEL_ORDER
        },
        "rejected": m.rejected,
        "created_at": m.created_at,
        "pipeline_config_hash": m.pipeline_config_hash,
    }
    if m.seed is not None:
        out["seed"] = m.seed
    if m.prng is not None:
        out["prng"] = m.prng
    return out


def manifest_from_dict(obj: dict) -> DatasetManifest:
    return DatasetManifest(
        source_path=obj["source_path"],
        n_examples=obj["n_examples"],
        class_counts={parse_class_label(k): v for k, v in obj["class_counts"].items()},
        rejected=obj["rejected"],
        created_at=obj["created_at"],
        pipeline_config_hash=obj["pipeline_config_hash"],
        seed=obj.get("seed"),
        prng=obj.get("prng"),
    )


def write_manifest(path: str, manifest: DatasetManifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest_to_dict(manifest), fh, ensure_ascii=False, indent=2)
        fh.write("\n")


def read_manifest(path: str) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as fh:
        return manifest_from_dict(json.load(fh))
