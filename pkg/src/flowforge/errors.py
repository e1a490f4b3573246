"""Exception types shared across flowforge modules."""


class FlowForgeError(Exception):
    """Base class for all flowforge errors."""


class BadMagic(FlowForgeError):
    """File does not start with the expected magic tag."""


class Truncated(FlowForgeError):
    """Byte stream length does not match the declared dimensions."""


class BadDims(FlowForgeError):
    """Dimensions are non-positive or not divisible as required."""


class DimMismatch(FlowForgeError):
    """Grids passed to an operation do not share the required dimensions."""


class ShapeMismatch(DimMismatch):
    """Tensor shapes are incompatible with the requested graph operation."""


class OutOfRange(FlowForgeError):
    """Sample coordinate lies outside the valid image region."""


class BadParams(FlowForgeError):
    """Scene generation parameters are invalid."""


class BadSpec(FlowForgeError):
    """Network or stack specification is invalid."""


class MissingScale(FlowForgeError):
    """A weighted loss scale has no matching prediction."""


class BadScale(FlowForgeError):
    """Schedule scale factor outside (0, 1]."""


class BadPlan(FlowForgeError):
    """Unknown curriculum plan identifier."""


class BadBins(FlowForgeError):
    """Histogram bin edges are not strictly ascending."""


class EmptyMask(FlowForgeError):
    """Evaluation mask selects zero pixels."""


class ConfigError(FlowForgeError):
    """Run configuration is inconsistent or incomplete."""
