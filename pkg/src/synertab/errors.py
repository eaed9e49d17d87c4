"""Exception hierarchy. CLI exit codes map one family per subclass."""


class SynertabError(Exception):
    """Base class for all package errors."""


class ConfigError(SynertabError):
    """Bad configuration, schema, or input file. CLI exit code 2."""


class ProviderError(SynertabError):
    """Annotator-side failure. CLI exit code 3."""


class ParseError(ProviderError):
    """No usable confidence value in an annotator response (retryable)."""


class ProviderUnreachable(ProviderError):
    """Provider cannot be reached after transport retries.

    ``partial`` carries row_id -> parsed confidence for rows completed
    before the abort, so callers can report partial results.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = dict(partial or {})


class TrainingError(SynertabError):
    """Training-phase failure (non-finite loss, empty early-stop set). CLI exit code 4."""


class StateError(SynertabError):
    """Persisted-state problem: checksum mismatch, version skew, lock conflict. CLI exit code 5."""
