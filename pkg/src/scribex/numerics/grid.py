"""Dense multi-dimensional value carrier used by every module.

A Grid wraps a contiguous numpy array of the globally configured
precision (see ``precision``). Grids are immutable by convention after
creation; the only sanctioned in-place mutation is the optimizer's
parameter update between training steps.

``const=True`` marks data that never needs a gradient (images, masks,
fixed coefficients). Operations whose operands are all const produce
const results and are not recorded on any tape.
"""

import numpy as np

from .precision import current_dtype, finite_checks_enabled


class Grid:
    __slots__ = ("data", "const")

    def __init__(self, data, const=False):
        arr = np.ascontiguousarray(data, dtype=current_dtype())
        if arr.ndim > 4:
            raise ValueError(f"Grid supports at most 4 axes, got shape {arr.shape}")
        if finite_checks_enabled() and not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values in Grid of shape {arr.shape}")
        self.data = arr
        self.const = const

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() requires a single-element Grid, got shape {self.shape}")
        return float(self.data.reshape(()))

    def to_numpy(self):
        return np.array(self.data, copy=True)

    def __repr__(self):
        tag = ", const" if self.const else ""
        return f"Grid(shape={self.shape}{tag})"

    # Arithmetic operators delegate to the primitive ops; imported lazily
    # to avoid a circular module load.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def __neg__(self):
        from . import ops

        return ops.neg(self)


def as_grid(value, const=True):
    """Coerce numbers and arrays to Grid; existing Grids pass through."""
    if isinstance(value, Grid):
        return value
    return Grid(np.asarray(value), const=const)


def zeros(shape, const=False):
    return Grid(np.zeros(shape, dtype=current_dtype()), const=const)


def ones(shape, const=False):
    return Grid(np.ones(shape, dtype=current_dtype()), const=const)


def full(shape, value, const=False):
    return Grid(np.full(shape, value, dtype=current_dtype()), const=const)


def constant(data):
    return Grid(data, const=True)


def variable(data):
    return Grid(data, const=False)
