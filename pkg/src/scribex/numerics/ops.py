"""Differentiable primitives over Grids.

Each primitive computes its forward value, wraps it in a Grid, and (when
a Tape is active and at least one operand needs a gradient) records a
backward closure. Shapes follow the numpy convention with the channel
axis third from the end, so the same primitives serve (H, W), (C, H, W)
and (B, C, H, W) data.

Binary operations broadcast by numpy rules; the backward pass sums
gradient contributions over broadcast axes.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .grid import Grid, as_grid
from .tape import accumulate, active_tape

LOG_CLAMP_MIN = 1e-12  # lower clamp for log arguments; prevents -inf on saturated predictions
LOG_CLAMP_MAX = 1.0


def _result(data, operands, backward_fn):
    """Wrap ``data``; record ``backward_fn`` if any operand is tracked."""
    const = all(op.const for op in operands)
    out = Grid(data, const=const)
    if not const:
        tape = active_tape()
        if tape is not None:
            tape.record(out, backward_fn)
    return out


def _unbroadcast(g, shape):
    """Reduce an upstream gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_grid(a), as_grid(b)

    def bw(g, grads):
        if not a.const:
            accumulate(grads, a, _unbroadcast(g, a.shape))
        if not b.const:
            accumulate(grads, b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_grid(a), as_grid(b)

    def bw(g, grads):
        if not a.const:
            accumulate(grads, a, _unbroadcast(g, a.shape))
        if not b.const:
            accumulate(grads, b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_grid(a), as_grid(b)

    def bw(g, grads):
        if not a.const:
            accumulate(grads, a, _unbroadcast(g * b.data, a.shape))
        if not b.const:
            accumulate(grads, b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_grid(a), as_grid(b)

    def bw(g, grads):
        if not a.const:
            accumulate(grads, a, _unbroadcast(g / b.data, a.shape))
        if not b.const:
            accumulate(grads, b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), bw)


def neg(a):
    a = as_grid(a)

    def bw(g, grads):
        accumulate(grads, a, -g)

    return _result(-a.data, (a,), bw)


def maximum(a, b):
    """Elementwise maximum; gradient routes to the larger operand (ties to a)."""
    a, b = as_grid(a), as_grid(b)
    take_a = a.data >= b.data

    def bw(g, grads):
        if not a.const:
            accumulate(grads, a, _unbroadcast(np.where(take_a, g, 0.0), a.shape))
        if not b.const:
            accumulate(grads, b, _unbroadcast(np.where(take_a, 0.0, g), b.shape))

    return _result(np.where(take_a, a.data, b.data), (a, b), bw)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def sigmoid(x):
    x = as_grid(x)
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def bw(g, grads):
        accumulate(grads, x, g * y * (1.0 - y))

    return _result(y, (x,), bw)


def log(x):
    """Natural log with the argument clamped to [1e-12, 1].

    Outside the clamp range the function is constant, so the gradient is
    zero there; inside it is 1/x.
    """
    x = as_grid(x)
    clamped = np.clip(x.data, LOG_CLAMP_MIN, LOG_CLAMP_MAX)
    inside = (x.data >= LOG_CLAMP_MIN) & (x.data <= LOG_CLAMP_MAX)

    def bw(g, grads):
        accumulate(grads, x, np.where(inside, g / clamped, 0.0))

    return _result(np.log(clamped), (x,), bw)


def sqrt(x):
    x = as_grid(x)
    y = np.sqrt(x.data)

    def bw(g, grads):
        accumulate(grads, x, g / (2.0 * y))

    return _result(y, (x,), bw)


def absolute(x):
    x = as_grid(x)

    def bw(g, grads):
        accumulate(grads, x, g * np.sign(x.data))

    return _result(np.abs(x.data), (x,), bw)


def softmax_channels(x):
    """Softmax over the channel axis (third from the end)."""
    x = as_grid(x)
    if x.ndim < 3:
        raise ValueError(f"softmax_channels requires a channel axis, got shape {x.shape}")
    axis = x.ndim - 3
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g, grads):
        dot = (g * y).sum(axis=axis, keepdims=True)
        accumulate(grads, x, y * (g - dot))

    return _result(y, (x,), bw)


# ---------------------------------------------------------------------------
# reductions


def total(x):
    """Sum of all elements, as a scalar Grid."""
    x = as_grid(x)

    def bw(g, grads):
        accumulate(grads, x, np.broadcast_to(g, x.shape).copy())

    return _result(x.data.sum(), (x,), bw)


def mean(x):
    x = as_grid(x)
    n = x.size

    def bw(g, grads):
        accumulate(grads, x, np.broadcast_to(g / n, x.shape).copy())

    return _result(x.data.mean(), (x,), bw)


# ---------------------------------------------------------------------------
# structural ops


def reshape(x, shape):
    x = as_grid(x)
    old = x.shape

    def bw(g, grads):
        accumulate(grads, x, g.reshape(old))

    return _result(x.data.reshape(shape), (x,), bw)


def take_channel(x, index):
    """Select one channel (axis -3), dropping that axis."""
    x = as_grid(x)
    axis = x.ndim - 3
    if axis < 0:
        raise ValueError(f"take_channel requires a channel axis, got shape {x.shape}")
    sel = (slice(None),) * axis + (index,)

    def bw(g, grads):
        buf = np.zeros(x.shape, dtype=g.dtype)
        buf[sel] = g
        accumulate(grads, x, buf)

    return _result(x.data[sel], (x,), bw)


def concat_channels(parts):
    """Concatenate Grids along the channel axis (third from the end)."""
    parts = [as_grid(p) for p in parts]
    axis = parts[0].ndim - 3
    if axis < 0:
        raise ValueError("concat_channels requires at least 3 axes")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g, grads):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if not p.const:
                sel = (slice(None),) * axis + (slice(lo, hi),)
                accumulate(grads, p, g[sel])

    return _result(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


def matmul(a, b):
    a, b = as_grid(a), as_grid(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} vs {b.shape}")

    def bw(g, grads):
        if not a.const:
            accumulate(grads, a, g @ b.data.T)
        if not b.const:
            accumulate(grads, b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# spatial ops


def conv2d(x, kernel, stride=1, padding=0):
    """2-D cross-correlation of a (B, Cin, H, W) Grid with a (Cout, Cin, kh, kw) kernel.

    Output spatial extents follow the usual formula
    ``out = (in + 2*padding - k) // stride + 1``.
    """
    x, kernel = as_grid(x), as_grid(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-axis input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d requires stride >= 1 and padding >= 0, got {stride}, {padding}")
    batch, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if cin != kcin:
        raise ValueError(
            f"conv2d channel mismatch: input has {cin} channels but kernel expects {kcin} "
            f"(input {x.shape}, kernel {kernel.shape})"
        )
    hout = (h + 2 * padding - kh) // stride + 1
    wout = (w + 2 * padding - kw) // stride + 1
    if hout < 1 or wout < 1:
        raise ValueError(f"conv2d output would be empty for input {x.shape}, kernel {kernel.shape}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols: (B, Cin*kh*kw, Hout*Wout); one matmul per batch element via broadcasting
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(batch, cin * kh * kw, hout * wout)
    wmat = kernel.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wmat, cols).reshape(batch, cout, hout, wout)

    def bw(g, grads):
        gmat = g.reshape(batch, cout, hout * wout)
        if not kernel.const:
            dw = np.einsum("bol,bkl->ok", gmat, cols)
            accumulate(grads, kernel, dw.reshape(kernel.shape))
        if not x.const:
            dcols = np.matmul(wmat.T, gmat)  # (B, Cin*kh*kw, L)
            dcols = dcols.reshape(batch, cin, kh, kw, hout, wout)
            dxp = np.zeros((batch, cin, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * hout : stride, j : j + stride * wout : stride] += dcols[:, :, i, j]
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + w]
            accumulate(grads, x, dxp)

    return _result(out, (x, kernel), bw)


def add_channel_bias(x, bias):
    """Add a per-channel bias (shape (C,)) to a (..., C, H, W) Grid."""
    x, bias = as_grid(x), as_grid(bias)
    axis = x.ndim - 3
    if bias.ndim != 1 or bias.shape[0] != x.shape[axis]:
        raise ValueError(f"bias shape {bias.shape} does not match channel extent of {x.shape}")
    expand = bias.data.reshape((1,) * axis + (-1, 1, 1))

    def bw(g, grads):
        if not x.const:
            accumulate(grads, x, g)
        if not bias.const:
            reduce_axes = tuple(i for i in range(g.ndim) if i != axis)
            accumulate(grads, bias, g.sum(axis=reduce_axes))

    return _result(x.data + expand, (x, bias), bw)


def maxpool2(x):
    """2x2 max pooling with stride 2; requires even spatial extents."""
    x = as_grid(x)
    if x.ndim != 4:
        raise ValueError(f"maxpool2 expects a 4-axis Grid, got shape {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 requires even spatial extents, got {h}x{w}")
    win = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # first max wins, deterministic
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g, grads):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        accumulate(grads, x, dx)

    return _result(out, (x,), bw)


def upsample_nearest2(x):
    """Nearest-neighbor 2x upsampling over the last two axes."""
    x = as_grid(x)
    if x.ndim != 4:
        raise ValueError(f"upsample_nearest2 expects a 4-axis Grid, got shape {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g, grads):
        b, c, h2, w2 = g.shape
        dx = g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
        accumulate(grads, x, dx)

    return _result(out, (x,), bw)


def gradx(u):
    """Forward difference along the last axis; last column is 0."""
    u = as_grid(u)
    d = np.zeros_like(u.data)
    d[..., :-1] = u.data[..., 1:] - u.data[..., :-1]

    def bw(g, grads):
        du = np.zeros_like(g)
        du[..., :-1] -= g[..., :-1]
        du[..., 1:] += g[..., :-1]
        accumulate(grads, u, du)

    return _result(d, (u,), bw)


def grady(u):
    """Forward difference along the second-to-last axis; last row is 0."""
    u = as_grid(u)
    d = np.zeros_like(u.data)
    d[..., :-1, :] = u.data[..., 1:, :] - u.data[..., :-1, :]

    def bw(g, grads):
        du = np.zeros_like(g)
        du[..., :-1, :] -= g[..., :-1, :]
        du[..., 1:, :] += g[..., :-1, :]
        accumulate(grads, u, du)

    return _result(d, (u,), bw)


def global_avg_pool(x):
    """Mean over the spatial axes of a (B, C, H, W) Grid, keeping them as 1x1."""
    x = as_grid(x)
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects a 4-axis Grid, got shape {x.shape}")
    _, _, h, w = x.shape

    def bw(g, grads):
        accumulate(grads, x, np.broadcast_to(g / (h * w), x.shape).copy())

    return _result(x.data.mean(axis=(2, 3), keepdims=True), (x,), bw)


def bilinear_sample(x, rows, cols):
    """Sample a (C, H, W) Grid at fractional pixel coordinates.

    ``rows``/``cols`` are numpy arrays of identical shape giving the
    (possibly fractional) source pixel position of each output pixel in
    array index units. Samples outside the frame read zeros. The result
    is differentiable with respect to ``x`` only; the coordinates are
    treated as constants.
    """
    x = as_grid(x)
    if x.ndim != 3:
        raise ValueError(f"bilinear_sample expects a (C, H, W) Grid, got shape {x.shape}")
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    if rows.shape != cols.shape:
        raise ValueError(f"coordinate shapes differ: {rows.shape} vs {cols.shape}")
    c, h, w = x.shape
    out_shape = rows.shape

    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = (rows - r0).astype(x.data.dtype)
    fc = (cols - c0).astype(x.data.dtype)

    flat = x.data.reshape(c, h * w)
    corners = []
    for dr, dc, wgt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        ri, ci = r0 + dr, c0 + dc
        ok = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        idx = (np.clip(ri, 0, h - 1) * w + np.clip(ci, 0, w - 1)).ravel()
        wgt = (wgt * ok).ravel()
        corners.append((idx, wgt))
    out = np.zeros((c,) + (rows.size,), dtype=x.data.dtype)
    for idx, wgt in corners:
        out += flat[:, idx] * wgt
    out = out.reshape((c,) + out_shape)

    def bw(g, grads):
        gflat = g.reshape(c, -1)
        buf = np.zeros((c, h * w), dtype=g.dtype)
        for idx, wgt in corners:
            np.add.at(buf, (slice(None), idx), gflat * wgt)
        accumulate(grads, x, buf.reshape(x.shape))

    return _result(out, (x,), bw)
