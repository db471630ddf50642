"""Audio captioning with an auxiliary visual stream via a multi-encoder transformer."""

from .tensor import Tensor, Tape, backward, grad_check

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "backward", "grad_check", "__version__"]
