"""Semantic segmentation with standard and dilated convolutional networks.

Pure CPU implementation: exact forward and backward passes for dilated
convolutions, transposed convolutions, pooling, and the surrounding
training and evaluation machinery, with a compiled kernel core and a
bit-identical pure-Python fallback.
"""

__version__ = "0.1.0"

from dilseg.tensor import Tensor

__all__ = ["Tensor", "__version__"]
