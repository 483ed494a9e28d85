"""Exception types shared across the package."""


class WarptomoError(Exception):
    """Base class for all package errors."""


class MrcFormatError(WarptomoError):
    """File is not a readable MRC2014 container (bad magic or header)."""


class MrcModeError(WarptomoError):
    """MRC mode other than 2 (32-bit float); not supported."""


class MrcTruncatedError(WarptomoError):
    """MRC payload shorter than the header promises."""


class AnglesParseError(WarptomoError):
    """Non-numeric line in a tilt-angle file."""

    def __init__(self, path, line_number, line):
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: not a number: {line!r}")


class InverseMapError(WarptomoError):
    """Fixed-point inversion of a deformation did not converge."""

    def __init__(self, residual, last_iterate, max_iter):
        self.residual = residual
        self.last_iterate = last_iterate
        super().__init__(
            f"inverse map not converged after {max_iter} iterations "
            f"(max residual {residual:.3e})"
        )


class NonFiniteGradientError(WarptomoError):
    """A gradient block contains NaN or infinity."""

    def __init__(self, block):
        self.block = block
        super().__init__(f"non-finite gradient in parameter block {block!r}")


class TrainingDivergedError(WarptomoError):
    """Loss became non-finite; carries the last finite state."""

    def __init__(self, epoch, checkpoint):
        self.epoch = epoch
        self.checkpoint = checkpoint
        super().__init__(f"training loss non-finite at epoch {epoch}")


class ShapeMismatchError(WarptomoError):
    """Two volumes or series that must agree in shape do not."""
