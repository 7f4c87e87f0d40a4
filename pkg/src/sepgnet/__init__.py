"""Convolution networks with learnable group structure.

Channel connectivity of a convolution is a binary relationship matrix built
from sign gates via Kronecker-factored 2x2 blocks; the gates train jointly
with the weights through a straight-through estimator, so the network's
group structure (and with it any multi-branch topology) is learned rather
than fixed. Includes miniature ResNet/UNet assemblies, a numpy training
stack, synthetic multi-source data, and an experiment harness with a CLI.
"""

__version__ = "0.1.0"

from . import architectures, autodiff, container, data, harness, layers, relmatrix, training

__all__ = [
    "architectures",
    "autodiff",
    "container",
    "data",
    "harness",
    "layers",
    "relmatrix",
    "training",
    "__version__",
]
