"""Finite-difference verification of tape gradients."""

import numpy as np

from .grid import Grid
from .tape import Tape


def gradcheck(f, x, h=1e-5):
    """Compare the tape gradient of ``f`` at ``x`` against central differences.

    ``f`` maps a Grid to a scalar Grid. Returns the maximum over elements
    of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). Run under
    float64 precision for meaningful results.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    probe = Grid(x.data, const=False)
    with Tape() as tape:
        out = f(probe)
    if not isinstance(out, Grid) or out.size != 1:
        raise ValueError("gradcheck requires f to return a scalar Grid")
    analytic = tape.backward(out).get(probe)
    if analytic is None:
        analytic = np.zeros_like(probe.data)

    numeric = np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        hi = f(probe).item()
        flat[i] = saved - h
        lo = f(probe).item()
        flat[i] = saved
        nflat[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
