"""Exception hierarchy shared by the engine, the CLI and the HTTP layer."""


class MultiMotionError(Exception):
    """Base class for every error raised by the tracking engine."""


class NonPositiveDepth(MultiMotionError):
    pass


class InvalidDepth(MultiMotionError):
    pass


class BehindCamera(MultiMotionError):
    pass


class EmptyFrame(MultiMotionError):
    pass


class EmptySegment(MultiMotionError):
    pass


class ProviderFailure(MultiMotionError):
    pass


class MalformedFile(MultiMotionError):
    """A binary or text artifact does not follow its documented layout."""

    def __init__(self, path, offset: int, reason: str):
        self.path = str(path)
        self.offset = offset
        self.reason = reason
        super().__init__(f"{self.path}: malformed at byte {offset}: {reason}")


class DimensionMismatch(MultiMotionError):
    pass


class DegenerateConfiguration(MultiMotionError):
    pass


class InsufficientInliers(MultiMotionError):
    pass


class NoAssociations(MultiMotionError):
    pass


class UnknownId(MultiMotionError):
    pass


class DegenerateCloud(MultiMotionError):
    pass


class EmptyCloud(MultiMotionError):
    pass


class ConfigError(MultiMotionError):
    pass


class InputNotFound(MultiMotionError):
    """A required input file or directory is missing."""

    def __init__(self, path, what: str = "input"):
        self.path = str(path)
        super().__init__(f"{what} not found: {self.path}")
