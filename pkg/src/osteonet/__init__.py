"""From-scratch CNN engine and knee X-ray osteoporosis classification pipeline."""

from .rng import Rng
from .tensor import Tape, Tensor

__all__ = ["Rng", "Tape", "Tensor"]
__version__ = "0.1.0"
