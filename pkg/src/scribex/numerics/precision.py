"""Global precision configuration for all Grid arithmetic.

Two modes exist: float32 for training speed and float64 for verification.
In float64 mode every operation additionally checks that its result is
finite; a NaN or Inf raises immediately instead of propagating.
"""

from contextlib import contextmanager

import numpy as np

_MODES = {"float32": np.float32, "float64": np.float64}

_state = {"dtype": np.float64, "check_finite": True}


def set_precision(mode, check_finite=None):
    """Switch the working dtype ('float32' or 'float64') for new Grids.

    ``check_finite`` defaults to True in float64 mode and False in
    float32 mode; pass an explicit bool to override.
    """
    if mode not in _MODES:
        raise ValueError(f"unknown precision mode {mode!r}; expected one of {sorted(_MODES)}")
    _state["dtype"] = _MODES[mode]
    if check_finite is None:
        check_finite = mode == "float64"
    _state["check_finite"] = bool(check_finite)


def current_dtype():
    return _state["dtype"]


def finite_checks_enabled():
    return _state["check_finite"]


@contextmanager
def precision(mode, check_finite=None):
    """Temporarily switch precision, restoring the previous mode on exit."""
    saved = dict(_state)
    set_precision(mode, check_finite)
    try:
        yield
    finally:
        _state.update(saved)
