"""Tape-based reverse-mode gradients over numpy arrays."""

from . import ops
from .engine import Tape, Tensor, active_tape, backward, set_strict_finite, value_of
from .fdcheck import FdReport, finite_diff_check
from .params import (
    ParamSet,
    SplitMix64,
    kaiming_uniform,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "FdReport",
    "ParamSet",
    "SplitMix64",
    "Tape",
    "Tensor",
    "active_tape",
    "backward",
    "finite_diff_check",
    "kaiming_uniform",
    "load_checkpoint",
    "ops",
    "save_checkpoint",
    "set_strict_finite",
    "value_of",
]
