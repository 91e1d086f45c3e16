from typing import Dict, List, Optional


class MaceError(Exception):
    """Base class for all errors raised by maceexplain."""


class InputShapeError(MaceError, ValueError):
    """An array or tensor does not have the expected shape."""


class ConfigurationError(MaceError, ValueError):
    """A configuration value or call argument is invalid."""


class CheckpointError(MaceError):
    """A checkpoint archive is missing, malformed or not usable."""


class PruningError(MaceError):
    """Pruning would leave the model in an invalid state."""


class TrainingError(MaceError, RuntimeError):
    """Training did not produce a usable model."""


class TrainingDivergedError(TrainingError):
    """A loss term became NaN or infinite during training."""

    def __init__(self, term: str, epoch: int, step: int):
        self.term = term
        self.epoch = epoch
        self.step = step
        super().__init__(
            f"Loss term {term} is not finite "
            f"(epoch {epoch}, step {step})"
        )


class ToyTrainingError(TrainingError):
    """The toy classifier stayed below the required held-out accuracy."""

    def __init__(
        self,
        accuracy: float,
        required: float,
        epoch_losses: Optional[List[float]] = None,
        class_accuracy: Optional[Dict[int, float]] = None,
    ):
        self.accuracy = accuracy
        self.required = required
        self.epoch_losses = list(epoch_losses or [])
        self.class_accuracy = dict(class_accuracy or {})
        last_loss = (
            f"{self.epoch_losses[-1]:.4f}" if self.epoch_losses else "n/a"
        )
        per_class = ", ".join(
            f"{k}: {acc:.2f}" for k, acc in sorted(self.class_accuracy.items())
        )
        super().__init__(
            f"Toy classifier reached held-out accuracy {accuracy:.3f}, "
            f"required {required:.3f} (final training loss {last_loss}; "
            f"per-class accuracy {per_class or 'n/a'})"
        )
