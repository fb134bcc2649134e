"""Exception hierarchy shared by all modules."""


class ShareLensError(Exception):
    """Base class for every error raised by the package."""


class SchemaError(ShareLensError):
    pass


class DuplicateKeyError(ShareLensError):
    pass


class ConsistencyError(ShareLensError):
    pass


class OutsideShareError(ShareLensError):
    pass


class FormulaError(ShareLensError):
    pass


class ConfigError(ShareLensError):
    pass


class DomainError(ShareLensError, ValueError):
    pass


class ConvergenceError(ShareLensError):
    """Iterative routine ran out of iterations.

    ``last`` carries the final residual norm or objective value.
    """

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class RankDeficiencyError(ShareLensError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = list(columns)


class IdentificationError(ShareLensError):
    pass


class SampleAlignmentError(ShareLensError):
    pass


class EmbeddingError(ShareLensError):
    pass
