"""Exception hierarchy shared by all platform modules."""


class CastlineError(Exception):
    """Base class for all platform errors."""


# -- registry / metamodel ----------------------------------------------------

class DuplicateId(CastlineError):
    pass


class InvalidAsset(CastlineError):
    pass


class EmptyChannelList(CastlineError):
    pass


class DuplicateChannelName(CastlineError):
    pass


class UnknownAsset(CastlineError):
    pass


class UnknownSeries(CastlineError):
    pass


class UnknownAttribute(CastlineError):
    pass


class InvalidRange(CastlineError):
    pass


class OverlappingSegment(CastlineError):
    pass


# -- storage -----------------------------------------------------------------

class TypeMismatch(CastlineError):
    pass


class UnsortedBatch(CastlineError):
    pass


class InvalidCursor(CastlineError):
    pass


class InvalidResolution(CastlineError):
    pass


class Unanswerable(CastlineError):
    """Requested range has been purged at every stored aggregation level."""


# -- views / re-indexing -----------------------------------------------------

class NegativeSpeed(CastlineError):
    pass


class UnsortedInput(CastlineError):
    pass


class OutOfCoverage(CastlineError):
    pass


class OverlappingCuts(CastlineError):
    pass


class UnknownProduct(CastlineError):
    pass


class MissingOffset(CastlineError):
    pass


class UnknownView(CastlineError):
    pass


class InvalidDefinition(CastlineError):
    pass


# -- connectors / federation -------------------------------------------------

class DuplicateKind(CastlineError):
    pass


class UnknownKind(CastlineError):
    pass


class OverlappingSegments(CastlineError):
    pass


class ConnectorInitFailure(CastlineError):
    pass


class SegmentUnavailable(CastlineError):
    """A federated sub-query failed; carries the failing segment's identity."""

    def __init__(self, message: str, segment: str = ""):
        super().__init__(message)
        self.segment = segment


# -- config / service / simulator ---------------------------------------------

class ConfigError(CastlineError):
    """Invalid service configuration; message carries the offending path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class InvalidScenario(CastlineError):
    pass


class ServiceUnreachable(CastlineError):
    pass
