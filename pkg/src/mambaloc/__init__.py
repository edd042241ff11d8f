"""Image forgery localization with selective state space models.

A self-contained pipeline: a numpy tensor core with reverse-mode autodiff, a
selective-scan state space layer with a four-direction interleaved 2D variant,
a hybrid SSM/CNN encoder with a lightweight all-scale decoder, synthetic
tampered-image data, training and evaluation loops, and a CLI.
"""

from .tensor import GradTape, NumericError, ShapeError, Tensor, grad_check

__version__ = "0.1.0"

__all__ = [
    "GradTape",
    "NumericError",
    "ShapeError",
    "Tensor",
    "grad_check",
    "__version__",
]
