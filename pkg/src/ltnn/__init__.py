"""ltnn: fully-convolutional conditional image generation.

A self-contained stack: a small reverse-mode autodiff tensor core (with
compiled im2col/col2im kernels and a pure-numpy fallback), a conditional
generator/discriminator pair whose per-condition weight banks update
selectively, procedural multi-view training data, an alternating ADAM
training loop, image metrics and a CLI.
"""

from .config import DatasetConfig, ModelConfig, TrainConfig
from .tensor import Tensor, grad_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "grad_check",
    "ModelConfig",
    "DatasetConfig",
    "TrainConfig",
    "__version__",
]
