"""Few-sample recognition with feature-space augmentation and dynamic refinement, on a numpy autograd engine."""

from .tensor import Tensor, backward, no_grad

__all__ = ["Tensor", "backward", "no_grad"]
__version__ = "0.1.0"
