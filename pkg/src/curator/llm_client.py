"""Client for producing trace bundles from an OpenAI-compatible endpoint.

For each query the client issues one greedy request (temperature 0, with
token log-probabilities) plus k sampled requests, parses the committed
answer out of every completion, and assembles a TraceBundle. Failures are
isolated per query: a query that keeps failing is recorded and skipped,
never aborting the run.

Retries use exponential backoff with full jitter (base 0.5 s, doubling per
attempt). 429 and 5xx responses and network errors are retried; any other
4xx is treated as a permanent request error.
"""

from __future__ import annotations

import logging
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from itertools import islice
from typing import Iterable, Iterator

import requests

from .errors import EndpointError
from .model import (
    DEFAULT_SAMPLE_PARAMS,
    GREEDY_PARAMS,
    QueryTuple,
    SamplingParams,
    TraceBundle,
    find_answer_span,
    make_trace,
)

log = logging.getLogger(__name__)

LLM_API_KEY_ENV = "CURATOR_LLM_API_KEY"

_RETRY_BASE_SECONDS = 0.5

# test seam: patched out so retry tests do not sleep for real
_sleep = time.sleep

SYSTEM_PROMPT = (
    "You are an molecular and cellular biology expert analyzing gene regulation upon "
    "CRISPRi knockdown. First, provide your reasoning process within <think> </think> "
    "tags. Consider relevant pathways (e.g., cell-type specific biology, ribosome "
    "biogenesis, transcription, mitochondrial function, stress response), gene "
    "interactions, and cell-specific context. Then, choose one option from the "
    "following and place your choice within <answer> </answer> tags: 'upregulated', "
    "'downregulated', or 'not differentially expressed'. Example: <think> [Your "
    "reasoning here] </think><answer> [upregulated / downregulated / not "
    "differentially expressed] </answer>"
)

USER_TEMPLATE = (
    "Analyze the regulatory effect of knocking down the {perturbation} gene on the "
    "{gene} gene in a single-cell {cell_type} cell line using CRISPR interference."
)


def build_prompt(query: QueryTuple) -> tuple[str, str]:
    """Render the (system, user) message pair for one query.

    Pure string substitution; identical inputs give byte-identical prompts.
    """
    user = USER_TEMPLATE.format(
        perturbation=query.perturbation,
        gene=query.gene,
        cell_type=query.cell_type,
    )
    return SYSTEM_PROMPT, user


@dataclass(frozen=True)
class GenerationConfig:
    base_url: str
    model: str
    api_key: str | None = None
    k: int = 8
    greedy_params: SamplingParams = GREEDY_PARAMS
    sample_params: SamplingParams = DEFAULT_SAMPLE_PARAMS
    max_tokens: int = 2048
    request_timeout: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 8
    logprobs: bool = True
    send_top_k: bool = True
    ppl_span: str = "full"

    def __post_init__(self):
        if not self.base_url:
            raise ValueError("generation base_url must be non-empty")
        if not self.model:
            raise ValueError("generation model must be non-empty")
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if not self.greedy_params.is_greedy:
            raise ValueError("greedy_params must have temperature 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.ppl_span not in ("full", "answer"):
            raise ValueError(f"ppl_span must be 'full' or 'answer', got {self.ppl_span!r}")

    def resolved_api_key(self) -> str | None:
        return self.api_key or os.environ.get(LLM_API_KEY_ENV)


class UsageCounters:
    """Thread-safe, monotone counters for one generation run.

    requests counts completed successful requests; retried counts retry
    attempts; failed counts requests that never succeeded.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.requests = 0
        self.prompt_tokens = 0
        self.completion_tokens = 0
        self.retried = 0
        self.failed = 0

    def add_success(self, usage: dict | None) -> None:
        with self._lock:
            self.requests += 1
            if usage:
                self.prompt_tokens += int(usage.get("prompt_tokens", 0))
                self.completion_tokens += int(usage.get("completion_tokens", 0))

    def add_retry(self) -> None:
        with self._lock:
            self.retried += 1

    def add_failure(self) -> None:
        with self._lock:
            self.failed += 1

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "requests": self.requests,
                "prompt_tokens": self.prompt_tokens,
                "completion_tokens": self.completion_tokens,
                "retried": self.retried,
                "failed": self.failed,
            }


def _completion_payload(
    cfg: GenerationConfig, query: QueryTuple, params: SamplingParams, want_logprobs: bool
) -> dict:
    system, user = build_prompt(query)
    payload: dict = {
        "model": cfg.model,
        "messages": [
            {"role": "system", "content": system},
            {"role": "user", "content": user},
        ],
        "temperature": params.temperature,
        "max_tokens": cfg.max_tokens,
    }
    if not params.is_greedy:
        payload["top_p"] = params.top_p
        if cfg.send_top_k and params.top_k is not None:
            payload["top_k"] = params.top_k
    if params.seed is not None:
        payload["seed"] = params.seed
    if want_logprobs:
        payload["logprobs"] = True
    return payload


def _post_completion(cfg: GenerationConfig, payload: dict, counters: UsageCounters) -> dict:
    url = cfg.base_url.rstrip("/") + "/v1/chat/completions"
    headers = {}
    key = cfg.resolved_api_key()
    if key:
        headers["Authorization"] = f"Bearer {key}"
    last_error = "no attempt made"
    for attempt in range(cfg.max_retries + 1):
        try:
            resp = requests.post(url, json=payload, headers=headers, timeout=cfg.request_timeout)
        except requests.RequestException as exc:
            last_error = f"network error: {exc}"
        else:
            if resp.status_code == 200:
                try:
                    body = resp.json()
                except ValueError:
                    counters.add_failure()
                    raise EndpointError("endpoint returned non-JSON body") from None
                counters.add_success(body.get("usage"))
                return body
            if resp.status_code != 429 and resp.status_code < 500:
                counters.add_failure()
                raise EndpointError(
                    f"endpoint rejected request: HTTP {resp.status_code}: {resp.text[:200]}"
                )
            last_error = f"HTTP {resp.status_code}"
        if attempt < cfg.max_retries:
            counters.add_retry()
            _sleep(random.uniform(0, _RETRY_BASE_SECONDS * (2**attempt)))
    counters.add_failure()
    raise EndpointError(f"endpoint unreachable after {cfg.max_retries + 1} attempts: {last_error}")


def _parse_completion(body: dict) -> tuple[str, list[str] | None, list[float] | None]:
    try:
        choice = body["choices"][0]
        text = choice["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise EndpointError(f"malformed completion response: {str(body)[:200]}") from None
    if not isinstance(text, str):
        raise EndpointError("completion content is not a string")
    tokens = values = None
    lp = choice.get("logprobs")
    if isinstance(lp, dict) and isinstance(lp.get("content"), list):
        try:
            tokens = [str(item["token"]) for item in lp["content"]]
            values = [float(item["logprob"]) for item in lp["content"]]
        except (KeyError, TypeError, ValueError):
            raise EndpointError("malformed logprobs in completion response") from None
    return text, tokens, values


def _answer_span_logprobs(
    text: str, tokens: list[str], values: list[float]
) -> tuple[float, ...] | None:
    """Keep only the log-probabilities of tokens overlapping the committed
    answer content. Falls back to None when the span cannot be located or
    the token strings do not reassemble the text."""
    if "".join(tokens) != text:
        return None
    span = find_answer_span(text)
    if span is None:
        return None
    start, end = span
    kept = []
    offset = 0
    for token, value in zip(tokens, values):
        token_end = offset + len(token)
        if token_end > start and offset < end:
            kept.append(value)
        offset = token_end
    return tuple(kept) if kept else None


def generate_bundle(
    cfg: GenerationConfig, query: QueryTuple, counters: UsageCounters | None = None
) -> TraceBundle:
    """Generate one greedy trace plus cfg.k samples for a query.

    The greedy request carries temperature 0 and asks for token
    log-probabilities (unless disabled); sampled requests carry exactly
    cfg.sample_params, with seeds offset per sample when a seed is set.
    A greedy response missing log-probabilities is kept but flagged by the
    absence of token_logprobs.
    """
    if counters is None:
        counters = UsageCounters()
    body = _post_completion(
        cfg, _completion_payload(cfg, query, cfg.greedy_params, cfg.logprobs), counters
    )
    text, tokens, values = _parse_completion(body)
    logprobs: tuple[float, ...] | None = None
    if values:
        logprobs = tuple(values)
        if cfg.ppl_span == "answer" and tokens is not None:
            sliced = _answer_span_logprobs(text, tokens, values)
            if sliced is None:
                log.warning(
                    "query %s: could not locate answer span in tokens; keeping full-trace "
                    "log-probabilities",
                    query.id,
                )
            else:
                logprobs = sliced
    elif cfg.logprobs:
        log.warning(
            "query %s: endpoint returned no log-probabilities for the greedy trace; "
            "perplexity will be unavailable",
            query.id,
        )
    greedy = make_trace(text, cfg.greedy_params, logprobs)

    samples = []
    for i in range(cfg.k):
        params = cfg.sample_params
        if params.seed is not None:
            params = replace(params, seed=params.seed + i)
        body = _post_completion(cfg, _completion_payload(cfg, query, params, False), counters)
        sample_text, _, sample_values = _parse_completion(body)
        samples.append(
            make_trace(sample_text, params, tuple(sample_values) if sample_values else None)
        )
    return TraceBundle(query=query, greedy=greedy, samples=tuple(samples))


def _batched(iterable: Iterable, size: int) -> Iterator[list]:
    it = iter(iterable)
    while True:
        batch = list(islice(it, size))
        if not batch:
            return
        yield batch


def generate_dataset(
    cfg: GenerationConfig,
    queries: Iterable[QueryTuple],
    counters: UsageCounters | None = None,
) -> Iterator[tuple[QueryTuple, TraceBundle | None, str | None]]:
    """Generate bundles for a query stream with bounded concurrency.

    Yields (query, bundle, error) in input order; exactly one of bundle and
    error is set. At most cfg.max_in_flight requests are outstanding at any
    moment (each worker runs its query's requests sequentially).
    """
    if counters is None:
        counters = UsageCounters()

    def worker(query: QueryTuple):
        try:
            return query, generate_bundle(cfg, query, counters), None
        except EndpointError as exc:
            log.warning("query %s failed: %s", query.id, exc)
            return query, None, str(exc)

    if cfg.max_in_flight == 1:
        for query in queries:
            yield worker(query)
        return
    with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
        for batch in _batched(queries, cfg.max_in_flight * 4):
            yield from pool.map(worker, batch)


def sft_record(bundle: TraceBundle) -> dict:
    """Render one bundle as a supervised fine-tuning example.

    The user message is re-rendered through build_prompt, so exports match
    generation prompts byte for byte; the assistant turn is the greedy
    trace verbatim.
    """
    system, user = build_prompt(bundle.query)
    return {
        "messages": [
            {"role": "system", "content": system},
            {"role": "user", "content": user},
            {"role": "assistant", "content": bundle.greedy.text},
        ]
    }
