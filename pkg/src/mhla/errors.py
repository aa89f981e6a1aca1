"""Exception types raised across the package."""


class MHLAError(Exception):
    """Base class for library errors."""


class ShapeError(MHLAError, ValueError):
    pass


class PartitionError(MHLAError, ValueError):
    pass


class CoefficientError(MHLAError, ValueError):
    pass


class DegenerateNormalizerError(MHLAError, ArithmeticError):
    def __init__(self, row, value):
        self.row = int(row)
        self.value = float(value)
        super().__init__(
            f"normalizer for row {self.row} is {self.value:.3e} (< 1e-30); "
            "use a nonnegative feature map or disable normalization"
        )


class SVDConvergenceError(MHLAError, ArithmeticError):
    def __init__(self, sweeps, residual):
        self.sweeps = sweeps
        self.residual = residual
        super().__init__(f"Jacobi SVD did not converge after {sweeps} sweeps (off-diagonal residual {residual:.3e})")


class StreamError(MHLAError, RuntimeError):
    pass


class TrainingError(MHLAError, FloatingPointError):
    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at step {step}")


class FixtureError(MHLAError, IOError):
    code = "fixture"


class FixtureMagicError(FixtureError):
    code = "bad-magic"


class FixtureVersionError(FixtureError):
    code = "bad-version"


class FixtureTruncatedError(FixtureError):
    code = "truncated"
