"""RGB-thermal segmentation with fusion/decoupling regularisers on a small
from-scratch autodiff core."""

from . import kernels
from .tensor import Tensor, stop_gradient

__version__ = "0.1.0"

__all__ = ["Tensor", "kernels", "stop_gradient", "__version__"]
