"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage/config errors -> 1,
data errors -> 2, numerical failures -> 3.
"""


class ViewfixError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(ViewfixError):
    """Malformed or inconsistent run configuration."""


class DataError(ViewfixError):
    """Missing, malformed, or mismatched input data."""


class FlowEstimationError(ViewfixError):
    """A configured flow estimator failed; callers may fall back."""


class TrainingDivergedError(ViewfixError):
    """Loss became non-finite during optimization.

    ``checkpoint_path`` points at the diagnostic checkpoint written just
    before aborting (None if writing it failed or no path was configured).
    """

    def __init__(self, message, step=None, checkpoint_path=None):
        super().__init__(message)
        self.step = step
        self.checkpoint_path = checkpoint_path
