"""Exception hierarchy.

``ValidationError`` subclasses signal bad inputs (CLI exit code 1); everything
else deriving from ``HandPriorError`` is a runtime failure (exit code 2).
"""


class HandPriorError(Exception):
    pass


class ValidationError(HandPriorError, ValueError):
    pass


# geometry
class ZeroAxis(ValidationError):
    pass


class DegenerateAxes(ValidationError):
    pass


class BehindCamera(ValidationError):
    pass


class NotWatertight(ValidationError):
    pass


class NonManifold(ValidationError):
    pass


class EmptyMesh(ValidationError):
    pass


# hand
class InvalidPose(ValidationError):
    pass


class InvalidFrames(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


# prior / training
class EmptyCollection(ValidationError):
    pass


class InsufficientData(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class NonFiniteLoss(HandPriorError):
    pass


class OpenSurface(HandPriorError):
    pass


class EmptyField(HandPriorError):
    pass


# data generation
class ParamOutOfRange(ValidationError):
    pass


class GraspFailed(HandPriorError):
    pass


class FramingFailed(HandPriorError):
    pass


# evaluation
class ManifestMismatch(ValidationError):
    pass


class CheckpointPriorMismatch(ValidationError):
    pass


class IoError(HandPriorError, OSError):
    pass
