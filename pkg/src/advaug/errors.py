"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or unknown configuration; maps to CLI exit code 2."""


class ConsistencyError(RuntimeError):
    """An internal object violated one of its own invariants."""


class ContractViolation(RuntimeError):
    """A caller broke an API contract (e.g. eval-mode forward through an auxiliary BN group)."""


class TrainingAbort(RuntimeError):
    """Non-finite loss or parameter detected; training cannot continue. Maps to CLI exit code 3."""

    def __init__(self, message, last_checkpoint=None):
        if last_checkpoint is not None:
            message = f"{message} (last good checkpoint: {last_checkpoint})"
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
