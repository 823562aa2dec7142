"""
Exception hierarchy shared by every pyRCF module.

All library errors derive from `RCFError`, and each concrete error also
derives from the closest builtin so that callers catching `ValueError`,
`RuntimeError` or `OSError` keep working.
"""

from __future__ import annotations
from typing import Optional, Sequence


class RCFError(Exception):
    """Base class of every error raised by pyRCF."""


class FormatError(RCFError, ValueError):
    """A binary artifact (`.flo`, RCFF, RCFK, PGM/PPM) is malformed or truncated."""


class ShapeError(RCFError, ValueError):
    """Two arguments do not live on the same grid or do not have the same length."""


class ConfigError(RCFError, ValueError):
    """A configuration, a scenario parameter or a dataset is invalid or missing."""


class IoError(RCFError, OSError):
    """An output path could not be written."""


class DivergenceError(RCFError, RuntimeError):
    """The training loss became non-finite.

    Attributes:
        stage (str): name of the stage (or sub-stage) that diverged.
        step (int): optimizer step at which the loss was observed.
        recent_losses (tuple): the last finite losses seen before the failure.
        history (DataFrame): the loss log up to the failing step, attached
            by the training loops; `None` when raised outside of them.
    """

    history = None

    def __init__(self, stage: str, step: int, loss: float, recent_losses: Optional[Sequence[float]] = None):
        self.stage = stage
        self.step = step
        self.loss = loss
        self.recent_losses = tuple(recent_losses or ())
        super().__init__(
            f"non-finite loss {loss!r} in {stage} at step {step} "
            f"(last finite losses: {list(self.recent_losses)})"
        )
