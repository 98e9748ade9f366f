"""Video frame interpolation with flow-guided local attention."""

from ._kernels import BACKEND as KERNEL_BACKEND
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "Tensor", "backward", "no_grad", "__version__"]
