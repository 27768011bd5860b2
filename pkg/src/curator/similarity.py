"""Trace-to-trace similarity providers feeding the consistency signal.

Three interchangeable providers, all returning scores in [0, 1]:

- lexical: term-frequency cosine over lowercased word tokens (offline
  default, no dependencies)
- answer: 1.0 when two traces commit to the same parsed answer, else 0.0
- remote: batched HTTP cross-encoder behind a tiny JSON protocol
  (POST {base_url}/score with {"pairs": [[a, b], ...]} returning
  {"scores": [...]}); out-of-range scores are clamped, length mismatches
  refused

Scores are not assumed symmetric; callers decide argument order.
"""

from __future__ import annotations

import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass
from functools import lru_cache
from math import sqrt
from typing import Iterable, Sequence

import requests

from .errors import ProtocolError, ServiceUnavailable, UnparsedTrace
from .model import ParseStatus, ReasoningTrace, extract_answer

log = logging.getLogger(__name__)

SCORER_API_KEY_ENV = "CURATOR_SCORER_API_KEY"

_RETRY_BASE_SECONDS = 0.25

# test seam: patched out so retry tests do not sleep for real
_sleep = time.sleep


class SimilarityProvider:
    """score(a, b) -> similarity in [0, 1]. Batch calls preserve pair order."""

    name = "abstract"

    def score(self, a: str, b: str) -> float:
        raise NotImplementedError

    def score_many(self, pairs: Sequence[tuple[str, str]]) -> list[float]:
        return [self.score(a, b) for a, b in pairs]


_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)


@lru_cache(maxsize=8192)
def _tf_vector(text: str) -> tuple[dict, float]:
    counts: dict[str, int] = {}
    for token in _WORD_RE.findall(text.lower()):
        counts[token] = counts.get(token, 0) + 1
    norm = sqrt(sum(c * c for c in counts.values()))
    return counts, norm


def lexical_cosine(a: str, b: str) -> float:
    """Cosine similarity of term-frequency vectors.

    Tokens are maximal runs of word characters after lowercasing, so the
    split happens on whitespace and punctuation alike. Two empty token
    vectors are identical (1.0); empty versus non-empty shares nothing (0.0).
    """
    ta, na = _tf_vector(a)
    tb, nb = _tf_vector(b)
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    if len(tb) < len(ta):
        ta, tb = tb, ta
    dot = sum(c * tb[t] for t, c in ta.items() if t in tb)
    return min(1.0, max(0.0, dot / (na * nb)))


class LexicalCosineProvider(SimilarityProvider):
    name = "lexical"

    def score(self, a: str, b: str) -> float:
        return lexical_cosine(a, b)


def answer_agreement(a: ReasoningTrace, b: ReasoningTrace) -> float:
    """1.0 when both traces parsed to the same class label, else 0.0."""
    if a.parse_status is not ParseStatus.OK or b.parse_status is not ParseStatus.OK:
        raise UnparsedTrace("answer agreement needs parsed answers on both traces")
    return 1.0 if a.answer == b.answer else 0.0


class AnswerAgreementProvider(SimilarityProvider):
    """Agreement of the final committed answers, parsed from raw text."""

    name = "answer"

    def score(self, a: str, b: str) -> float:
        label_a, status_a = extract_answer(a)
        label_b, status_b = extract_answer(b)
        if status_a is not ParseStatus.OK or status_b is not ParseStatus.OK:
            raise UnparsedTrace("answer agreement needs parseable answers on both texts")
        return 1.0 if label_a == label_b else 0.0


@dataclass(frozen=True)
class RemoteScorerConfig:
    base_url: str
    api_key: str | None = None
    timeout: float = 30.0
    max_retries: int = 3
    max_batch: int = 32
    max_in_flight: int = 8

    def __post_init__(self):
        if not self.base_url:
            raise ValueError("scorer base_url must be non-empty")
        if self.timeout <= 0:
            raise ValueError("scorer timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("scorer max_retries must be >= 0")
        if self.max_batch < 1:
            raise ValueError("scorer max_batch must be >= 1")
        if self.max_in_flight < 1:
            raise ValueError("scorer max_in_flight must be >= 1")

    def resolved_api_key(self) -> str | None:
        return self.api_key or os.environ.get(SCORER_API_KEY_ENV)


def _chunks(items: Sequence, size: int) -> Iterable[Sequence]:
    for start in range(0, len(items), size):
        yield items[start : start + size]


def _parse_score_response(body, expected: int) -> list[float]:
    if not isinstance(body, dict) or "scores" not in body:
        raise ProtocolError("scorer response has no 'scores' field")
    scores = body["scores"]
    if not isinstance(scores, list):
        raise ProtocolError("scorer 'scores' is not a list")
    if len(scores) != expected:
        raise ProtocolError(
            f"scorer returned {len(scores)} scores for {expected} pairs; refusing to truncate"
        )
    out = []
    for v in scores:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ProtocolError(f"scorer returned non-numeric score {v!r}")
        out.append(min(1.0, max(0.0, float(v))))
    return out


def _score_chunk(cfg: RemoteScorerConfig, chunk: Sequence[tuple[str, str]]) -> list[float]:
    url = cfg.base_url.rstrip("/") + "/score"
    payload = {"pairs": [[a, b] for a, b in chunk]}
    headers = {}
    key = cfg.resolved_api_key()
    if key:
        headers["Authorization"] = f"Bearer {key}"
    last_error = "no attempt made"
    for attempt in range(cfg.max_retries + 1):
        try:
            resp = requests.post(url, json=payload, headers=headers, timeout=cfg.timeout)
        except requests.RequestException as exc:
            last_error = f"network error: {exc}"
        else:
            if resp.status_code == 200:
                try:
                    body = resp.json()
                except ValueError:
                    raise ProtocolError("scorer returned non-JSON body") from None
                return _parse_score_response(body, len(chunk))
            if resp.status_code < 500:
                # the request itself was refused; retrying cannot help
                raise ProtocolError(
                    f"scorer rejected request: HTTP {resp.status_code}: {resp.text[:200]}"
                )
            last_error = f"HTTP {resp.status_code}"
        if attempt < cfg.max_retries:
            _sleep(random.uniform(0, _RETRY_BASE_SECONDS * (2**attempt)))
    raise ServiceUnavailable(
        f"scorer unreachable after {cfg.max_retries + 1} attempts: {last_error}"
    )


def remote_score_batch(cfg: RemoteScorerConfig, pairs: Sequence[tuple[str, str]]) -> list[float]:
    """Score text pairs via the remote endpoint, chunked by cfg.max_batch.

    Returns one score per pair, clamped to [0, 1], in input order.
    Retries network errors and 5xx responses with jittered exponential
    backoff; other failures raise immediately.
    """
    if not pairs:
        raise ValueError("pairs must be non-empty")
    out: list[float] = []
    for chunk in _chunks(pairs, cfg.max_batch):
        out.extend(_score_chunk(cfg, chunk))
    return out


class RemoteScorerProvider(SimilarityProvider):
    """Remote cross-encoder with a cap on concurrent in-flight requests."""

    name = "remote"

    def __init__(self, cfg: RemoteScorerConfig):
        self.cfg = cfg
        self._gate = threading.BoundedSemaphore(cfg.max_in_flight)

    def score(self, a: str, b: str) -> float:
        return self.score_many([(a, b)])[0]

    def score_many(self, pairs: Sequence[tuple[str, str]]) -> list[float]:
        if not pairs:
            return []
        out: list[float] = []
        for chunk in _chunks(pairs, self.cfg.max_batch):
            with self._gate:
                out.extend(_score_chunk(self.cfg, chunk))
        return out


def get_provider(name: str, scorer_cfg: RemoteScorerConfig | None = None) -> SimilarityProvider:
    """Look up a provider by CLI name."""
    if name == "lexical":
        return LexicalCosineProvider()
    if name == "answer":
        return AnswerAgreementProvider()
    if name == "remote":
        if scorer_cfg is None:
            raise ValueError("remote provider needs a scorer config")
        return RemoteScorerProvider(scorer_cfg)
    raise ValueError(f"unknown similarity provider {name!r}")
