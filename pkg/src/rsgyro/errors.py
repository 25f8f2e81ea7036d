"""Exception types shared across the toolkit.

Each class marks a distinct failure mode so callers (and the CLI exit-code
mapping) can tell contract violations apart without parsing messages.
"""


class RangeError(ValueError):
    """A scalar argument fell outside its documented range."""


class InvalidTraceError(ValueError):
    """A gyro trace violates its structural invariants (too few samples, non-increasing timestamps)."""


class CoverageError(ValueError):
    """A gyro trace does not span the time window being queried."""


class PointAtInfinityError(ArithmeticError):
    """A projective transform sent a point to (near) infinity."""


class ShapeError(ValueError):
    """Array dimensions do not match the operation's contract."""


class NonContractiveFieldError(RuntimeError):
    """Fixed-point field inversion diverged; the field is not a contraction."""


class StepOrderError(ValueError):
    """Reverse diffusion step indices are not strictly decreasing."""


class ContractError(RuntimeError):
    """A pluggable component (e.g. a denoiser) violated its callable contract."""


class DegenerateMaskError(ValueError):
    """A validity mask has no valid pixels, so a masked statistic is undefined."""


class FlowFormatError(ValueError):
    """A flow file is malformed; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset
