"""qfuse: gradient-balanced fusion and attention distillation for low-bit QAT."""

from qfuse.autodiff import Parameter, Tape, Tensor, backward, finite_difference_grad

__all__ = [
    "Parameter",
    "Tape",
    "Tensor",
    "backward",
    "finite_difference_grad",
]

__version__ = "0.1.0"
