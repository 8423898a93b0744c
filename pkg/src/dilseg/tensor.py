"""Dense float64 arrays with strict shape bookkeeping.

A Tensor is a thin wrapper over a C-contiguous float64 ndarray of rank
1..4, row-major (last index fastest). There is no broadcasting anywhere
in this package: elementwise combinations require identical shapes, which
removes a whole class of silent-shape bugs in a hand-built framework.
Computation is float64 throughout; 32-bit appears only in the model file
format.
"""

import numpy as np

from dilseg.errors import ShapeError

MAX_RANK = 4


class Tensor:
    """Shape-checked owner of a contiguous float64 array."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim < 1 or arr.ndim > MAX_RANK:
            raise ShapeError(f"tensor rank must be 1..{MAX_RANK}, got {arr.ndim}")
        if arr.size == 0:
            raise ShapeError(f"every extent must be >= 1, got shape {arr.shape}")
        self.data = arr

    @classmethod
    def zeros(cls, shape):
        shape = _checked_shape(shape)
        return cls(np.zeros(shape))

    @classmethod
    def from_values(cls, shape, values):
        shape = _checked_shape(shape)
        flat = np.asarray(values, dtype=np.float64).ravel()
        expected = int(np.prod(shape))
        if flat.size != expected:
            raise ShapeError(
                f"shape {shape} holds {expected} values, got {flat.size}"
            )
        return cls(flat.reshape(shape))

    @property
    def shape(self):
        return self.data.shape

    @property
    def rank(self):
        return self.data.ndim

    def at(self, coords):
        """Read one element; coords must match rank and lie inside the extents."""
        coords = tuple(int(c) for c in coords)
        if len(coords) != self.data.ndim:
            raise IndexError(
                f"expected {self.data.ndim} coords for shape {self.shape}, got {len(coords)}"
            )
        for c, extent in zip(coords, self.shape):
            if c < 0 or c >= extent:
                raise IndexError(f"coords {coords} out of range for shape {self.shape}")
        return float(self.data[coords])

    def values(self):
        """Flat row-major copy of the stored values."""
        return self.data.ravel().tolist()

    def copy(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def _checked_shape(shape):
    try:
        shape = tuple(int(s) for s in shape)
    except TypeError as exc:
        raise ShapeError(f"shape must be a sequence of extents, got {shape!r}") from exc
    if len(shape) < 1 or len(shape) > MAX_RANK:
        raise ShapeError(f"tensor rank must be 1..{MAX_RANK}, got {len(shape)}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"every extent must be >= 1, got shape {shape}")
    return shape
