"""Exception hierarchy shared across the toolkit."""


class CirError(Exception):
    """Base class for every error raised by cirlab."""


class ZeroVector(CirError, ValueError):
    pass


class DimMismatch(CirError, ValueError):
    pass


class BatchMismatch(CirError, ValueError):
    pass


class ProviderError(CirError):
    """A provider call failed for a single item."""


class ProviderTimeout(ProviderError):
    pass


class ProviderMalformedResponse(ProviderError):
    pass


class EmptyCompletion(ProviderError):
    pass


class EncoderNotLoaded(CirError, RuntimeError):
    pass


class InvalidSubgroup(CirError, ValueError):
    pass


class EmptyCaption(CirError, ValueError):
    pass


class UnfilteredTriplet(CirError, ValueError):
    pass


class EmptyGallery(CirError, ValueError):
    pass


class MissingSubset(CirError, ValueError):
    pass


class InvalidRecord(CirError, ValueError):
    pass


class MissingInput(CirError, FileNotFoundError):
    def __init__(self, path):
        super().__init__(f"missing input: {path}")
        self.path = path


class FormatVersionMismatch(CirError, ValueError):
    pass


class CorruptCheckpoint(CirError, ValueError):
    pass
