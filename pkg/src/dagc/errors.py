"""Exception types shared across the package."""


class DagcError(Exception):
    """Base class for package-specific errors."""


class BudgetInfeasibleError(DagcError):
    """A closed-form allocation asked a worker for a ratio above 1.

    Raised instead of clamping: a clamped allocation would silently break
    the optimality guarantee the allocator advertises.
    """

    def __init__(self, worker: int, ratio: float, mean_ratio: float):
        self.worker = worker          # 1-based, matching the public docs
        self.ratio = ratio
        self.mean_ratio = mean_ratio
        super().__init__(
            f"allocation infeasible: worker {worker} would need ratio "
            f"{ratio:.6g} > 1; lower the mean ratio (currently {mean_ratio:.6g})"
        )


class IdxFormatError(DagcError):
    """An IDX file failed validation; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class ConfigError(DagcError):
    """A run configuration failed validation."""
