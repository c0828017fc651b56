class NBFAError(ValueError):
    """Base class for every error raised by the nbfa package."""


class ParameterError(NBFAError):
    """A distribution or sampler received a parameter outside its support."""


class DomainError(NBFAError):
    """A function was evaluated outside its domain."""


class ConfigError(NBFAError):
    """Invalid or incompatible run configuration."""


class CorpusParseError(NBFAError):
    def __init__(self, message: str, line_number: int | None = None) -> None:
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class EmptyVocabularyError(NBFAError):
    pass


class CapabilityError(NBFAError):
    """The requested operation is not defined for this model."""


class SchemaError(NBFAError):
    pass


class InvariantError(NBFAError):
    """A latent-state invariant was violated after a sampler step."""
