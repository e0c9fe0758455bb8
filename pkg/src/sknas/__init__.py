"""Superkernel neural architecture search for image denoising, on a small numpy autodiff core."""

from .archspec import ArchitectureSpec
from .blocks import UNetSpec, build_model, distill_model, forward_model
from .superkernel import KernelChoice, SliceGrid, SuperKernel
from .tensor import Rng, Tensor

__all__ = [
    "ArchitectureSpec",
    "KernelChoice",
    "Rng",
    "SliceGrid",
    "SuperKernel",
    "Tensor",
    "UNetSpec",
    "build_model",
    "distill_model",
    "forward_model",
]
__version__ = "0.1.0"
