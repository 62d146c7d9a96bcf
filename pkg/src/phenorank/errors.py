"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit 2,
data problems exit 3, remote-backend problems exit 4.
"""


class PhenorankError(Exception):
    """Base class for all package errors."""


class ConfigError(PhenorankError):
    """Invalid configuration value, flag, or config file."""


class TemplateError(ConfigError):
    """Prompt template cannot be rendered (bad placeholder)."""


class DataError(PhenorankError):
    """Input data violates a documented precondition."""


class ParseError(DataError):
    """Malformed input text (ontology stanza, TSV row, JSON line)."""


class StructuralError(DataError):
    """Ontology graph violates a structural invariant (cycle, dangling edge,
    missing or ambiguous root)."""


class UnknownTermError(DataError):
    """A term id does not resolve to a usable (non-obsolete) ontology term."""


class IngestError(DataError):
    """Annotation rows reference unknown terms or carry an unknown source."""


class GenerationError(DataError):
    """Synthetic narrative cannot be generated for a patient."""


class EmbeddingError(DataError):
    """Text cannot be embedded (empty after normalization)."""


class IndexBuildError(DataError):
    """Vector index construction failed for a term entry."""


class RetrievalError(DataError):
    """Retrieval against an unusable (empty) index."""


class SamplingError(DataError):
    """Negative sampling found no usable pool."""


class TrainingError(DataError):
    """Model training preconditions not met."""


class BackendError(PhenorankError):
    """Base class for remote inference backend failures."""


class CredentialError(BackendError):
    """Missing or rejected credential. Never carries the secret itself."""


class BackendUnavailableError(BackendError):
    """Transport failures persisted after retries were exhausted."""


class ProtocolError(BackendError):
    """The backend answered, but not in the agreed shape."""
