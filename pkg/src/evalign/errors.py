"""Exception hierarchy shared across the harness."""


class EvalignError(Exception):
    """Base class for all harness errors."""


class DatasetParseError(EvalignError):
    """A dataset document is malformed; the message names the offending entry."""


class VocabularyError(EvalignError):
    """An object category is not covered by the configured vocabulary."""


class ConsistencyError(EvalignError):
    """A record violates a cross-field invariant (e.g. absurd flag vs answer)."""


class CategoryError(EvalignError):
    """A record carries a value outside its closed category set."""


class SplitSizeError(EvalignError):
    """Requested query count does not leave room for a demonstration pool."""


class BalanceError(EvalignError):
    """A balancing policy cannot be satisfied (some class exhausted)."""


class ContaminationError(EvalignError):
    """A reserved marker string appeared inside user-supplied prompt text."""


class ArityError(EvalignError):
    """An assembler received the wrong number of demonstrations."""


class TemplateError(EvalignError):
    """A prompt template is malformed (bad placeholder count, clashing markers)."""


class EndpointError(EvalignError):
    """The endpoint stayed unreachable after the retry budget was spent."""


class ProtocolError(EvalignError):
    """The endpoint replied with something that is not the wire schema."""


class CapacityError(EvalignError):
    """The endpoint rejected the prompt as too large; carries the shot count."""

    def __init__(self, message: str, shots: int | None = None):
        super().__init__(message)
        self.shots = shots


class JudgeProtocolError(EvalignError):
    """The judge reply had no parseable score or the score was out of range."""


class MockScriptError(EvalignError):
    """A mock-server behavior script is malformed."""


class ConfigError(EvalignError):
    """An experiment configuration is invalid or incomplete."""


class ReportError(EvalignError):
    """Report emission was asked to do something impossible (e.g. empty report)."""
