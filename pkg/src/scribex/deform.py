"""Random thin-plate-spline deformation of images and predictions.

The deformation runs in three steps: lay out an n x n lattice of control
points over the normalized square [-1, 1]^2, jitter each coordinate by a
uniform draw from [-beta, beta], and fit a thin-plate spline through the
point pairs. Images are then backward-warped: each output pixel's
normalized coordinate is mapped through the spline fitted in the inverse
direction (perturbed -> original) and the source image is sampled there
bilinearly. Pixels whose mapped coordinate falls outside [-1, 1]^2 are
flagged invalid and set to zero instead of being fabricated by clamping.

Normalized coordinates place the center of pixel k of a W-wide row at
-1 + (2k + 1)/W, so a translation by exactly 2/W moves content by one
pixel. All operations are pure given an explicit RngState.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Grid, RngState

DEFAULT_TPS_RIDGE = 1e-10  # stabilizes near-degenerate perturbations; 0 keeps interpolation exact


@dataclass
class DeformationSpec:
    """Hyper-parameters of the deformation operator plus its random stream."""

    alpha: float
    beta: float
    seed: RngState
    regularization: float = DEFAULT_TPS_RIDGE

    def __post_init__(self):
        if not 0.0 < self.alpha <= 2.0:
            raise ValueError(f"alpha must lie in (0, 2], got {self.alpha}")
        if self.beta < 0.0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if isinstance(self.seed, int):
            self.seed = RngState(self.seed)


@dataclass
class ControlGrid:
    """Control-point lattice with its sampled perturbation."""

    c: np.ndarray  # (N, 2) lattice coordinates in [-1, 1]^2, row-major
    n: int  # points per axis
    v: np.ndarray = None  # (N, 2) perturbations in [-beta, beta]
    c_bar: np.ndarray = None  # (N, 2) perturbed coordinates, c + v

    @property
    def n_points(self):
        return self.n * self.n


@dataclass
class TPSMap:
    """Fitted thin-plate spline mapping R^2 -> R^2.

    The kernel is U(r) = r^2 log(r^2) with U(0) = 0; any constant factor
    relative to the classical r^2 log r form is absorbed by the fitted
    weights. ``forward`` records whether the map sends original to
    deformed coordinates (True) or the reverse (False).
    """

    source_points: np.ndarray  # (N, 2)
    affine: np.ndarray  # (3, 2) rows: constant, x, y
    weights: np.ndarray  # (N, 2)
    forward: bool = True

    def __call__(self, points):
        points = np.asarray(points, dtype=np.float64)
        k = _tps_kernel_matrix(points, self.source_points)
        ones = np.ones((points.shape[0], 1))
        p = np.hstack([ones, points])
        return p @ self.affine + k @ self.weights


def _tps_kernel_matrix(a, b):
    """U(r) = r^2 log(r^2) between every row of ``a`` and of ``b``."""
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = d2 * np.log(d2)
    k[d2 == 0.0] = 0.0
    return k


def make_cp_grid(alpha):
    """n x n control-point lattice over [-1, 1]^2 with n = floor(2/alpha) + 1.

    Rows are emitted row-major: y varies slowest, x fastest, corners at
    (-1, -1) and (1, 1), uniform spacing 2/(n - 1).
    """
    if not 0.0 < alpha <= 2.0:
        raise ValueError(f"alpha must lie in (0, 2], got {alpha}")
    n = int(math.floor(2.0 / alpha)) + 1
    axis = np.linspace(-1.0, 1.0, n)
    xs, ys = np.meshgrid(axis, axis)  # row-major: ys varies along rows
    c = np.stack([xs.ravel(), ys.ravel()], axis=1)
    return ControlGrid(c=c, n=n)


def sample_variation(grid, beta, rng):
    """Draw the perturbation matrix V ~ U[-beta, beta]^(N x 2) and advance ``rng``."""
    if beta < 0.0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    v = rng.uniform(-beta, beta, size=(grid.n_points, 2))
    return ControlGrid(c=grid.c, n=grid.n, v=v, c_bar=grid.c + v)


def tps_fit(source, target, regularization=0.0):
    """Fit the spline interpolating ``source`` rows to ``target`` rows.

    Solves the standard augmented system
        [K + reg*I, P; P^T, 0] [w; a] = [target; 0],  P = [1, x, y],
    whose side conditions make the kernel weights orthogonal to the
    constant and linear functions of the source coordinates. With
    ``regularization`` 0 the fitted map reproduces every target exactly.
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    n = source.shape[0]
    if n < 3:
        raise ValueError(f"TPS fit needs at least 3 points, got {n}")
    if source.shape != (n, 2) or target.shape != (n, 2):
        raise ValueError(f"expected (N, 2) source/target, got {source.shape} and {target.shape}")

    uniq = np.unique(source, axis=0)
    if uniq.shape[0] != n:
        raise ValueError(f"TPS source points contain duplicates ({n - uniq.shape[0]} repeated)")
    p = np.hstack([np.ones((n, 1)), source])
    if np.linalg.matrix_rank(p) < 3:
        raise ValueError("TPS source points are collinear; the affine part is underdetermined")

    k = _tps_kernel_matrix(source, source)
    if regularization:
        k = k + regularization * np.eye(n)
    lhs = np.zeros((n + 3, n + 3))
    lhs[:n, :n] = k
    lhs[:n, n:] = p
    lhs[n:, :n] = p.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = target
    try:
        sol = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"TPS system is singular for this control-point configuration: {exc}") from exc
    return TPSMap(source_points=source, affine=sol[n:], weights=sol[:n], forward=True)


def fit_warp_map(control, regularization=DEFAULT_TPS_RIDGE):
    """Fit the inverse-direction map (perturbed -> original) used for backward warping."""
    if control.c_bar is None:
        raise ValueError("ControlGrid has no sampled variation; call sample_variation first")
    tmap = tps_fit(control.c_bar, control.c, regularization)
    tmap.forward = False
    return tmap


def pixel_centers(h, w):
    """Normalized coordinates of pixel centers: (x, y) arrays of shape (h, w)."""
    xs = -1.0 + (2.0 * np.arange(w) + 1.0) / w
    ys = -1.0 + (2.0 * np.arange(h) + 1.0) / h
    return np.meshgrid(xs, ys)


def warp(tmap, image):
    """Backward-warp a (C, H, W) Grid through ``tmap``.

    Returns (warped, validity): validity is a const (1, H, W) Grid that is
    1 where the mapped coordinate lies inside [-1, 1]^2 and 0 elsewhere;
    invalid output pixels are zero. Differentiable with respect to
    ``image``; the warp is linear in it.
    """
    if image.ndim != 3:
        raise ValueError(f"warp expects a (C, H, W) Grid, got shape {image.shape}")
    _, h, w = image.shape
    gx, gy = pixel_centers(h, w)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    mapped = tmap(pts)
    sx, sy = mapped[:, 0].reshape(h, w), mapped[:, 1].reshape(h, w)

    valid = ((np.abs(sx) <= 1.0) & (np.abs(sy) <= 1.0)).astype(image.data.dtype)
    # Clamp sampling to the pixel-center hull: coordinates in the half-pixel
    # fringe inside [-1, 1] replicate the border instead of reading padding
    # zeros, so a constant image stays constant on the whole valid region.
    rows = np.clip((sy + 1.0) * h / 2.0 - 0.5, 0.0, h - 1.0)
    cols = np.clip((sx + 1.0) * w / 2.0 - 0.5, 0.0, w - 1.0)
    sampled = nm.bilinear_sample(image, rows, cols)
    validity = nm.constant(valid[None])
    return nm.mul(sampled, validity), validity


def deform(image, spec):
    """Apply a freshly sampled deformation to a (C, H, W) Grid.

    Returns (warped, validity, control_grid). The ControlGrid lets the
    caller re-apply the identical deformation to another Grid, which the
    consistency loss requires. Pure in (image, alpha, beta, seed): the
    spec's RngState is cloned, not consumed.
    """
    control = make_cp_grid(spec.alpha)
    control = sample_variation(control, spec.beta, spec.seed.clone())
    tmap = fit_warp_map(control, spec.regularization)
    warped, validity = warp(tmap, image)
    return warped, validity, control
