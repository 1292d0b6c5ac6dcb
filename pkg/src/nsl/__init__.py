"""Neural similarity learning: convolution with a learnable bilinear similarity."""

from .autodiff import Tensor, backward, grad, no_grad
from .network import Network, NetworkSpec
from .similarity import bilinear_score, fold_kernel

__all__ = ["Tensor", "backward", "grad", "no_grad", "Network", "NetworkSpec", "bilinear_score", "fold_kernel"]
__version__ = "0.1.0"
