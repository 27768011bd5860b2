"""Uncertainty scoring for trace bundles.

Three signals, all oriented so that higher means more uncertain:

- perplexity: exp of the token-mean negative log-likelihood of the greedy
  trace, over all of its generated tokens (natural log)
- inconsistency: mean dissimilarity (1 - sim) between the greedy trace and
  each sampled trace, similarity order fixed as sim(greedy, sample)
- cocoa: 2 * inconsistency * perplexity, the hybrid used for curation

A metric variant selects which signal later ranks examples; the other
signals are still recorded when their inputs exist so scored files stay
complete.
"""

from __future__ import annotations

from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import islice
from math import exp, fsum
from typing import Iterable, Iterator, Sequence

from .errors import (
    EmptyLogProbs,
    MissingScoreInputs,
    NoSamples,
    PositiveLogProb,
    UnparsedTrace,
)
from .model import (
    LABEL_ORDER,
    ClassLabel,
    MetricVariant,
    ParseStatus,
    ScoredExample,
    TraceBundle,
    UncertaintyScores,
)
from .similarity import SimilarityProvider

#: Values above zero by at most this much are treated as rounding noise.
LOGPROB_TOLERANCE = 1e-9


def perplexity(logprobs: Sequence[float]) -> float:
    """exp(-mean(logprobs)) over every generated token.

    Raises EmptyLogProbs on an empty sequence and PositiveLogProb when any
    value exceeds zero beyond tolerance. The result is always >= 1.
    """
    if not logprobs:
        raise EmptyLogProbs("perplexity needs at least one token log-probability")
    for v in logprobs:
        if v > LOGPROB_TOLERANCE:
            raise PositiveLogProb(f"log-probability {v} is positive")
    total = fsum(min(v, 0.0) for v in logprobs)
    return exp(-total / len(logprobs))


def inconsistency(bundle: TraceBundle, provider: SimilarityProvider) -> float:
    """Mean of (1 - sim(greedy, sample)) over the bundle's samples.

    The greedy trace is always the first argument to the provider. The
    result is clamped to [0, 1].
    """
    if bundle.k == 0:
        raise NoSamples(f"bundle {bundle.query.id} has no sampled traces")
    pairs = [(bundle.greedy.text, s.text) for s in bundle.samples]
    sims = provider.score_many(pairs)
    dissim = [1.0 - min(1.0, max(0.0, s)) for s in sims]
    return min(1.0, max(0.0, fsum(dissim) / bundle.k))


def cocoa(inconsistency_value: float, ppl: float) -> float:
    """Hybrid uncertainty: 2 * inconsistency * perplexity."""
    if not 0.0 <= inconsistency_value <= 1.0:
        raise ValueError(f"inconsistency must be in [0, 1], got {inconsistency_value}")
    if ppl < 1.0 - 1e-9:
        raise ValueError(f"perplexity must be >= 1, got {ppl}")
    return 2.0 * inconsistency_value * ppl


def score_bundle(
    bundle: TraceBundle,
    provider: SimilarityProvider,
    variant: MetricVariant = MetricVariant.COCOA,
) -> ScoredExample:
    """Score one bundle under the given metric variant.

    The bundle must be scoreable (k >= 1, greedy answer parsed). Perplexity
    is computed whenever log-probabilities exist but is only required when
    the variant ranks by it.
    """
    if bundle.greedy.parse_status is not ParseStatus.OK:
        raise UnparsedTrace(f"bundle {bundle.query.id} has no parsed greedy answer")
    if bundle.k == 0:
        raise NoSamples(f"bundle {bundle.query.id} has no sampled traces")
    needs_ppl = variant in (MetricVariant.COCOA, MetricVariant.PERPLEXITY)
    logprobs = bundle.greedy.token_logprobs
    if needs_ppl and not logprobs:
        raise EmptyLogProbs(
            f"bundle {bundle.query.id} lacks token log-probabilities required by {variant.value}"
        )
    ppl = perplexity(logprobs) if logprobs else None
    inc = inconsistency(bundle, provider)
    return ScoredExample(
        bundle=bundle,
        scores=UncertaintyScores(
            ppl=ppl,
            inconsistency=inc,
            cocoa=None if ppl is None else cocoa(inc, ppl),
        ),
    )


@dataclass
class ScoreStats:
    """Tallies accumulated while scoring a dataset stream."""

    n_scored: int = 0
    rejected: int = 0
    class_counts: Counter = field(default_factory=Counter)

    def record(self, ex: ScoredExample) -> None:
        self.n_scored += 1
        self.class_counts[ex.predicted_label] += 1

    def counts_by_label(self) -> dict[ClassLabel, int]:
        return {label: self.class_counts.get(label, 0) for label in LABEL_ORDER}


def _score_or_tag(bundle, provider, variant):
    """Score one bundle, folding expected failures into a tagged result so
    parallel workers never raise across thread boundaries."""
    if not bundle.scoreable:
        return ("rejected", bundle.query.id, None)
    try:
        return ("scored", bundle.query.id, score_bundle(bundle, provider, variant))
    except (EmptyLogProbs, UnparsedTrace) as exc:
        return ("missing", bundle.query.id, str(exc))


def _batched(iterable: Iterable, size: int) -> Iterator[list]:
    it = iter(iterable)
    while True:
        batch = list(islice(it, size))
        if not batch:
            return
        yield batch


def score_dataset(
    bundles: Iterable[TraceBundle],
    provider: SimilarityProvider,
    variant: MetricVariant = MetricVariant.COCOA,
    workers: int = 1,
    stats: ScoreStats | None = None,
) -> Iterator[ScoredExample]:
    """Score a bundle stream, preserving input order.

    Bundles that are not scoreable (no samples, or an unparsed greedy
    answer) are skipped and tallied as rejected in stats. Bundles that are
    scoreable but lack inputs the variant requires abort the run at the end
    of the stream with MissingScoreInputs listing the offending query ids.

    Results are byte-for-byte identical for any worker count.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if stats is None:
        stats = ScoreStats()
    missing: list[str] = []
    reasons: set[str] = set()

    def handle(tagged) -> Iterator[ScoredExample]:
        tag, qid, payload = tagged
        if tag == "scored":
            stats.record(payload)
            yield payload
        elif tag == "rejected":
            stats.rejected += 1
        else:
            missing.append(qid)
            reasons.add(payload)

    if workers == 1:
        for bundle in bundles:
            yield from handle(_score_or_tag(bundle, provider, variant))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for batch in _batched(bundles, workers * 8):
                for tagged in pool.map(
                    lambda b: _score_or_tag(b, provider, variant), batch
                ):
                    yield from handle(tagged)
    if missing:
        raise MissingScoreInputs(missing, "; ".join(sorted(reasons)))
