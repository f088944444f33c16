"""Exception hierarchy shared across the package."""


class TransforMeshError(Exception):
    """Base class for all package errors."""


class ParseError(TransforMeshError):
    pass


class ValidationError(TransforMeshError):
    pass


class NonManifoldError(TransforMeshError):
    pass


class DecimationStuckError(TransforMeshError):
    pass


class ShapeError(TransforMeshError, ValueError):
    pass


class NonScalarError(TransforMeshError):
    pass


class AllMaskedError(TransforMeshError):
    pass


class NoSupervisedSlotError(TransforMeshError):
    pass


class DivergenceError(TransforMeshError):
    pass


class ManifestError(TransforMeshError):
    pass


class ConfigError(TransforMeshError):
    """Bad or missing configuration value.

    ``file`` and ``key`` are kept so the CLI can report them in its one-line
    error format.
    """

    def __init__(self, message, file=None, key=None):
        super().__init__(message)
        self.file = file
        self.key = key
