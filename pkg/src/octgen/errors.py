"""Exception hierarchy shared across the package.

Every error raised on a documented code path derives from OctgenError so the
CLI can map failures to machine-readable records and stable exit codes.
"""


class OctgenError(Exception):
    """Base class for all octgen errors."""


class EmptyInput(OctgenError):
    pass


class OutOfDomain(OctgenError):
    pass


class OutOfRange(OctgenError):
    pass


class DepthOverflow(OctgenError):
    pass


class DepthMismatch(OctgenError):
    pass


class ShapeMismatch(OctgenError):
    pass


class CountMismatch(OctgenError):
    pass


class NonScalarLossBackward(OctgenError):
    pass


class MissingGradient(OctgenError):
    pass


class NotFullGrid(OctgenError):
    pass


class MissingTrunk(OctgenError):
    pass


class MissingPrerequisiteCheckpoint(OctgenError):
    pass


class NonFiniteValue(OctgenError):
    """An operation produced NaN or Inf while finite checking was enabled."""


class EmptyIsoSurface(OctgenError):
    """The sampled scalar field has no sign change; returned mesh is empty."""


class ConfigError(OctgenError):
    pass
