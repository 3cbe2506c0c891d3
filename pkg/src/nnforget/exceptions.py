"""Exception hierarchy shared by all nnforget modules."""


class NNForgetError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(NNForgetError, ValueError):
    """Invalid hyperparameter, layer layout or policy value.

    ``key`` names the offending setting when one is known.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ShapeError(NNForgetError, ValueError):
    pass


class DataError(NNForgetError, ValueError):
    pass


class FormatError(DataError):
    """A file does not have the expected binary container layout."""


class SamplerError(NNForgetError, RuntimeError):
    pass


class FitError(NNForgetError, RuntimeError):
    pass
