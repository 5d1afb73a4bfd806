"""Reverse-mode differentiation tape.

Operations executed while a Tape is active append a backward closure in
execution order; replaying the list in reverse therefore visits every
node after all of its consumers. Gradient accumulators are keyed by Grid
identity (Grids hash by identity), so the returned map can be indexed
with the original parameter objects.

A Tape is single-owner: share nothing across threads except by giving
each thread its own Tape (the active-tape stack is thread-local).
"""

import threading

import numpy as np

from .grid import Grid

_local = threading.local()


def _stack():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    def __init__(self):
        self._ops = []
        self._produced = set()

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def record(self, result, backward_fn):
        self._produced.add(id(result))
        self._ops.append((result, backward_fn))

    def __len__(self):
        return len(self._ops)

    def backward(self, output):
        """Accumulate d(output)/dX for every non-const Grid on the tape.

        ``output`` must be a single-element Grid produced on this tape.
        """
        if not isinstance(output, Grid):
            raise TypeError("backward expects a Grid output")
        if output.size != 1:
            raise ValueError(f"backward requires a scalar output, got shape {output.shape}")
        if id(output) not in self._produced:
            raise ValueError("output Grid was not produced on this tape")
        grads = {output: np.ones_like(output.data)}
        for result, backward_fn in reversed(self._ops):
            g = grads.get(result)
            if g is not None:
                backward_fn(g, grads)
        return grads


def backward(tape, output):
    """Functional alias for ``tape.backward(output)``."""
    return tape.backward(output)


def accumulate(grads, grid, value):
    """Add ``value`` into the accumulator for ``grid`` (never in place)."""
    current = grads.get(grid)
    grads[grid] = value if current is None else current + value
