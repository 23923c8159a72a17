"""Exception types raised across the package."""


class UGVAEError(Exception):
    pass


class ContractError(UGVAEError, ValueError):
    """A caller broke a documented precondition (shapes, ranges, call order)."""


class InfiniteDivergenceError(UGVAEError, ArithmeticError):
    pass


class FormatError(UGVAEError):
    """Malformed or truncated binary file."""

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class CapacityError(UGVAEError, ValueError):
    """Not enough samples to build the requested batches."""


class TrainingDivergence(UGVAEError, FloatingPointError):
    """Non-finite loss during training.

    ``breakdown`` holds the offending ElboBreakdown and ``checkpoint`` the
    last parameters known to produce a finite loss.
    """

    def __init__(self, message, breakdown=None, checkpoint=None):
        super().__init__(message)
        self.breakdown = breakdown
        self.checkpoint = checkpoint
