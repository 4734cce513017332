"""Exception hierarchy shared by every pipeline stage.

Exit codes follow the CLI contract: 2 configuration, 3 data, 4 numerical.
"""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(PipelineError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class DataError(PipelineError):
    """Malformed or unusable input data."""

    exit_code = 3


class NumericalError(PipelineError):
    """A numerical routine failed to produce a usable result."""

    exit_code = 4


class TooShortError(DataError):
    """Audio shorter than a single analysis frame."""


class NoSpeechError(DataError):
    """An utterance has no speech frames left to work with."""


class StageOrderError(DataError):
    """An embedding was pushed backwards through the transform chain."""
