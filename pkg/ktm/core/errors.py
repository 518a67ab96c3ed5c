"""
Exception hierarchy shared by the library and the command line
"""


class KtmError(Exception):
    """Base class for all kernel topic model errors"""


class InvalidArgumentError(KtmError, ValueError):
    pass


class DimensionError(InvalidArgumentError):
    pass


class NumericalError(KtmError):
    """Factorization or evaluation broke down beyond the repair policy"""


class UnsupportedOperationError(KtmError):
    pass


class UnsupportedQueryError(KtmError):
    pass


class InvalidStateError(KtmError):
    pass


class CorpusFormatError(KtmError):
    pass


class ModelFormatError(KtmError):
    """Persisted model is truncated, corrupted or incomplete"""


class IncompatibleModelError(ModelFormatError):
    pass
