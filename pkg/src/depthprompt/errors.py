"""Exception hierarchy and the exit codes the CLI maps them to."""

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_DIVERGENCE = 5


class DepthPromptError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(DepthPromptError):
    """Invalid configuration: bad field values, weight-file shape mismatch."""

    exit_code = EXIT_CONFIG


class InputError(DepthPromptError):
    """Invalid runtime input: bad shapes, values out of range, NaN/Inf."""

    exit_code = EXIT_DATA


class ContractError(InputError):
    """A pyramid or tensor violated an inter-module shape/channel contract."""


class ShapeMismatchError(InputError):
    """Paired arrays disagree on spatial shape."""


class IllegalClassError(InputError):
    """A mask contains a value outside the class schema."""


class UnreadableFileError(InputError):
    """A data file is missing or cannot be decoded."""


class MissingLabelError(InputError):
    """A pseudo-label provider has no entry for a requested tile."""


class UndefinedMetricError(InputError):
    """Metrics requested on an empty confusion matrix or loss on all-ignored labels."""


class DivergenceError(DepthPromptError):
    """Training produced a non-finite loss."""

    exit_code = EXIT_DIVERGENCE

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")
