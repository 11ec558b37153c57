"""Exception hierarchy shared by every module.

Contract-style failures (bad shapes, bad geometry, bad configs) derive from
:class:`ContractError`; numeric failures (NaN, non-convergence) derive from
:class:`NumericError`.  The command-line front end maps the two families to
distinct exit codes.
"""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Tensor extents are incompatible."""


class GeometryError(ContractError):
    """Image or patch geometry is inconsistent."""


class SpecError(ContractError):
    """A generator spec is invalid (degenerate layout, unbounded warp)."""


class CompatibilityError(ContractError):
    """A checkpoint does not match the model configuration."""


class ValidationError(ContractError):
    """A configuration, corpus or manifest failed validation."""


class SegmentationError(ContractError):
    """Thresholding found no foreground."""


class NumericError(ArithmeticError):
    """Base class for numeric failures."""


class PoisonedStateError(NumericError):
    """A NaN or Inf reached the loss or the gradients."""


class InversionError(NumericError):
    """Fixed-point inversion of a warp did not converge."""
