class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class SchemaError(ValueError):
    """A trace file does not match the expected layout."""


class EmptyDatasetError(SchemaError):
    pass


class DomainError(ValueError):
    """An argument lies outside the domain of the operation (e.g. an action outside [0, 1])."""


class TrainingAborted(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
