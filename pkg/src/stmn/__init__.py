"""Superpoint-text matching for 3D referring expression segmentation."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, finite_difference_check, no_grad
from .config import RunConfig

__all__ = ["Tensor", "backward", "finite_difference_check", "no_grad",
           "RunConfig", "__version__"]
