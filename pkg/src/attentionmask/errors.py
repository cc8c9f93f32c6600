class ConfigError(ValueError):
    """Invalid configuration or argument ranges (CLI exit code 2)."""


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, step: int, epoch: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, step {step}")
        self.step = step
        self.epoch = epoch
        self.value = value
