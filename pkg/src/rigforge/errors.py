"""Exception types shared across the package."""


class RigforgeError(Exception):
    """Base class for all package errors."""


class ParseError(RigforgeError):
    pass


class EmptyMesh(RigforgeError):
    pass


class DegenerateMesh(RigforgeError):
    pass


class ShapeMismatch(RigforgeError):
    pass


class NonFiniteValue(RigforgeError):
    pass


class NonScalarRoot(RigforgeError):
    pass


class SolverFailure(RigforgeError):
    pass


class BadConfig(RigforgeError):
    pass


class OperatorMismatch(RigforgeError):
    pass


class MissingLandmarks(RigforgeError):
    pass


class LengthMismatch(RigforgeError):
    pass


class TopologyMismatch(RigforgeError):
    pass


class SingleComponent(RigforgeError):
    pass


class IoError(RigforgeError):
    pass


class VersionMismatch(RigforgeError):
    pass


class ChecksumMismatch(RigforgeError):
    pass


class BadParams(RigforgeError):
    pass


class DatasetMissing(RigforgeError):
    pass


class NonFiniteLoss(RigforgeError):
    pass


class CheckpointMismatch(RigforgeError):
    pass
