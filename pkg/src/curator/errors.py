"""Exception hierarchy shared across the curation pipeline.

Everything raised on purpose derives from CuratorError so the CLI can map
failures onto exit codes in one place. Value-level misuse of constructors
(bad temperatures, inconsistent fields) raises plain ValueError instead.
"""

from __future__ import annotations


class CuratorError(Exception):
    """Base class for all pipeline errors."""


class UnknownAnswerString(CuratorError):
    """A string inside answer tags is not one of the known class labels."""


class UnparsedTrace(CuratorError):
    """An operation needed a parsed answer but the trace has none."""


class EmptyLogProbs(CuratorError):
    """Perplexity was requested for a trace without token log-probabilities."""


class PositiveLogProb(CuratorError):
    """A token log-probability was positive beyond tolerance."""


class NoSamples(CuratorError):
    """Consistency was requested for a bundle with zero sampled traces."""


class MissingScore(CuratorError):
    """A scored example lacks a value under the requested ranking key."""


class MissingScoreInputs(CuratorError):
    """Scoreable bundles lacked inputs required by the metric variant."""

    def __init__(self, ids: list[str], reason: str):
        self.ids = list(ids)
        self.reason = reason
        shown = ", ".join(self.ids[:20])
        if len(self.ids) > 20:
            shown += f", ... ({len(self.ids)} total)"
        super().__init__(f"{reason} for query ids: {shown}")


class EmptyDataset(CuratorError):
    """A filter was applied to an empty dataset."""


class EmptyEvalSet(CuratorError):
    """An evaluation was requested on zero (gold, predicted) pairs."""


class TooFewExamples(CuratorError):
    """Decile stratification needs at least ten gold-labeled examples."""


class MissingGoldLabels(CuratorError):
    """Evaluation requires gold labels on every example."""


class ProtocolError(CuratorError):
    """A remote service violated its wire contract."""


class ServiceUnavailable(CuratorError):
    """A remote service stayed unreachable after all retries."""


class EndpointError(CuratorError):
    """The generation endpoint rejected a request or kept failing."""


class InvalidConfig(CuratorError):
    """A config file, env override, or config object is malformed."""


class JsonlFormatError(CuratorError):
    """A dataset file violates its schema; carries the failing line."""

    def __init__(self, path: str, lineno: int, message: str):
        self.path = path
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class UsageError(CuratorError):
    """Bad command-line or config usage; maps to exit code 64."""
