"""
Exceptions raised by the training engine and its harness.
"""


class TrainingError(Exception):
    """Base class for every error raised by apps.training."""


class ConfigurationError(TrainingError):
    """
    Invalid network, solver or experiment configuration.

    Args:
        errors: mapping of dotted field path -> list of messages, or a plain message
    """

    def __init__(self, errors):
        if isinstance(errors, dict):
            self.errors = errors
            message = '; '.join(
                f"{path}: {' '.join(str(m) for m in msgs)}" for path, msgs in sorted(errors.items())
            )
        else:
            self.errors = {'': [str(errors)]}
            message = str(errors)
        super().__init__(message)


class PropagationDiverged(TrainingError):
    """A non-finite state appeared during forward (or tangent) propagation."""

    def __init__(self, block, level=None):
        self.block = block
        self.level = level
        where = f"block {block}" if level is None else f"block {block} on level {level}"
        super().__init__(f"Propagation diverged at {where}")

    def at_level(self, level):
        return PropagationDiverged(self.block, level=level)


class LevelMismatch(TrainingError):
    """Transfer operator called with levels that are not adjacent in the requested direction."""


class CoherenceError(TrainingError):
    """Coarse objective gradient does not match the restricted fine gradient at the coarse entry point."""
