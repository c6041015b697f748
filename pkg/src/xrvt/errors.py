"""Exception types shared across the package."""
from __future__ import annotations


class XrvtError(Exception):
    """Base class for all package errors."""


class ShapeError(XrvtError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(XrvtError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(XrvtError, ValueError):
    """Invalid model, training, or command configuration."""


class FormatError(XrvtError, ValueError):
    """A persisted file (checkpoint, manifest, report) is malformed."""


class DivergedError(XrvtError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, step: int, loss: float, fold: int | None = None):
        where = "" if fold is None else f"fold {fold}, "
        super().__init__(f"training diverged at {where}epoch {epoch}, step {step} (loss={loss})")
        self.fold = fold
        self.epoch = epoch
        self.step = step
        self.loss = loss


class DataError(XrvtError, ValueError):
    """An image tree or manifest cannot be turned into a dataset."""
