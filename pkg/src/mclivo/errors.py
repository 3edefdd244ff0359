"""Exception hierarchy shared by all estimator modules."""


class MclivoError(Exception):
    """Base class for every error raised by this package."""


# geom
class BehindCamera(MclivoError):
    pass


class NonPositiveDepth(MclivoError):
    pass


# sync
class EmptyFrameList(MclivoError):
    pass


class UnsyncedFrames(MclivoError):
    pass


class ImuGap(MclivoError):
    pass


# imu
class NonMonotoneTimestamps(MclivoError):
    pass


class TimestampOutOfRange(MclivoError):
    pass


# voxmap
class TooFewPoints(MclivoError):
    pass


# photo
class PlaneTooClose(MclivoError):
    pass


class OutOfBounds(MclivoError):
    pass


# esikf
class NoStats(MclivoError):
    pass


class SingularInnovation(MclivoError):
    pass


class DimensionMismatch(MclivoError):
    pass


# sim / eval
class OutOfRange(MclivoError):
    pass


class TooFewPairs(MclivoError):
    pass


class MalformedFile(MclivoError):
    pass


class ScenarioError(MclivoError):
    pass
