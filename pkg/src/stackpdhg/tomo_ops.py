"""Imaging operators: fan-beam projector, finite differences, the
square-root Hanning detector filter and a separable Gaussian blur.

All of them are :class:`~stackpdhg.linop.LinearOperator` instances acting on
flat vectors laid out as in :mod:`stackpdhg.geometry`.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit
from scipy import ndimage

from .geometry import GridSpec, ScanGeometry
from .linop import LinearOperator

__all__ = [
    "FanBeamProjector",
    "FiniteDifference",
    "DirectionalDifference",
    "HanningSqrtFilter",
    "GaussianBlur",
    "make_projector",
    "make_finite_diff",
    "make_directional_diff",
    "make_hanning_sqrt_filter",
    "make_gaussian_blur",
    "hanning_multiplier",
    "gaussian_kernel",
    "blur_sinogram",
]


# --------------------------------------------------------------------------
# Joseph projector kernels.  img is (n_rows, nz, nx); sino is
# (n_views, n_rows, n_bins).  Each ray steps through the slices of its
# dominant axis and interpolates linearly along the other one; a voxel is
# touched at most once per ray, so the adjoint is the exact transpose.
# --------------------------------------------------------------------------


@njit(cache=True)
def _joseph_forward(img, x0, z0, hx, hz, sx, sz, ux, uz, sino):
    n_rows, nz, nx = img.shape
    n_views, n_bins = ux.shape
    for v in range(n_views):
        for b in range(n_bins):
            dx = ux[v, b]
            dz = uz[v, b]
            if abs(dx) * hz >= abs(dz) * hx:
                # slice i sits at x0 + i*hx; interpolate along z at f0 + i*df
                step = hx / abs(dx)
                f0 = (sz[v] + (x0 - sx[v]) / dx * dz - z0) / hz
                df = hx * dz / (dx * hz)
                for i in range(nx):
                    f = f0 + i * df
                    k = int(math.floor(f))
                    w = f - k
                    if 0 <= k < nz:
                        a = step * (1.0 - w)
                        for r in range(n_rows):
                            sino[v, r, b] += a * img[r, k, i]
                    if 0 <= k + 1 < nz:
                        a = step * w
                        for r in range(n_rows):
                            sino[v, r, b] += a * img[r, k + 1, i]
            else:
                step = hz / abs(dz)
                f0 = (sx[v] + (z0 - sz[v]) / dz * dx - x0) / hx
                df = hz * dx / (dz * hx)
                for j in range(nz):
                    f = f0 + j * df
                    k = int(math.floor(f))
                    w = f - k
                    if 0 <= k < nx:
                        a = step * (1.0 - w)
                        for r in range(n_rows):
                            sino[v, r, b] += a * img[r, j, k]
                    if 0 <= k + 1 < nx:
                        a = step * w
                        for r in range(n_rows):
                            sino[v, r, b] += a * img[r, j, k + 1]


@njit(cache=True)
def _joseph_adjoint(sino, x0, z0, hx, hz, sx, sz, ux, uz, img):
    n_rows, nz, nx = img.shape
    n_views, n_bins = ux.shape
    for v in range(n_views):
        for b in range(n_bins):
            dx = ux[v, b]
            dz = uz[v, b]
            if abs(dx) * hz >= abs(dz) * hx:
                step = hx / abs(dx)
                f0 = (sz[v] + (x0 - sx[v]) / dx * dz - z0) / hz
                df = hx * dz / (dx * hz)
                for i in range(nx):
                    f = f0 + i * df
                    k = int(math.floor(f))
                    w = f - k
                    if 0 <= k < nz:
                        a = step * (1.0 - w)
                        for r in range(n_rows):
                            img[r, k, i] += a * sino[v, r, b]
                    if 0 <= k + 1 < nz:
                        a = step * w
                        for r in range(n_rows):
                            img[r, k + 1, i] += a * sino[v, r, b]
            else:
                step = hz / abs(dz)
                f0 = (sx[v] + (z0 - sz[v]) / dz * dx - x0) / hx
                df = hz * dx / (dz * hx)
                for j in range(nz):
                    f = f0 + j * df
                    k = int(math.floor(f))
                    w = f - k
                    if 0 <= k < nx:
                        a = step * (1.0 - w)
                        for r in range(n_rows):
                            img[r, j, k] += a * sino[v, r, b]
                    if 0 <= k + 1 < nx:
                        a = step * w
                        for r in range(n_rows):
                            img[r, j, k + 1] += a * sino[v, r, b]


def _row_weights(grid: GridSpec, geom: ScanGeometry) -> np.ndarray:
    """Linear interpolation weights from y slices to detector rows."""
    y = grid.coords("y")
    rows = geom.row_centers()
    f = (rows - y[0]) / grid.step("y")
    w = np.maximum(0.0, 1.0 - np.abs(f[:, None] - np.arange(y.size)[None, :]))
    w[w < 1e-14] = 0.0
    return w


class FanBeamProjector(LinearOperator):
    """Ray-driven fan-beam projector with linear interpolation.

    One ray per detector bin center; the weight of a voxel is the ray's step
    length through its slice times the linear interpolation weight.  In 3-D
    the volume is first interpolated linearly along y onto the detector row
    positions and every row is projected as an independent fan-beam plane.
    """

    def __init__(self, grid: GridSpec, geom: ScanGeometry):
        if geom.is_3d != (grid.ndim == 3):
            raise ValueError("2-D grids need a 2-D geometry and 3-D grids a 3-D one")
        r_bound = 0.5 * math.hypot(grid.extent("x") + 2 * abs(grid.origin[0]),
                                   grid.extent("z") + 2 * abs(grid.origin[-1]))
        if geom.source_radius <= r_bound:
            raise ValueError("source trajectory passes through the image grid")
        if geom.detector_radius <= r_bound:
            raise ValueError("detector passes through the image grid")
        super().__init__(grid.size, geom.size)
        self.grid = grid
        self.geometry = geom
        sx, sz, ux, uz = geom.rays()
        self._rays = (np.ascontiguousarray(sx), np.ascontiguousarray(sz),
                      np.ascontiguousarray(ux), np.ascontiguousarray(uz))
        self._x0 = float(grid.coords("x")[0])
        self._z0 = float(grid.coords("z")[0])
        self._hx = grid.step("x")
        self._hz = grid.step("z")
        self._wy = None
        if grid.ndim == 3:
            wy = _row_weights(grid, geom)
            if not (wy.shape[0] == wy.shape[1] and np.array_equal(wy, np.eye(wy.shape[0]))):
                self._wy = wy
        self._n_rows = max(geom.n_rows, 1)

    def _to_rows(self, x):
        g = self.grid
        if g.ndim == 2:
            return x.reshape(1, *g.shape)
        vol = x.reshape(g.shape)  # (nz, ny, nx)
        if self._wy is None:
            return np.ascontiguousarray(vol.transpose(1, 0, 2))
        return np.ascontiguousarray(np.einsum("ry,zyx->rzx", self._wy, vol))

    def _from_rows(self, rows):
        if self.grid.ndim == 2:
            return rows.reshape(-1)
        if self._wy is None:
            return np.ascontiguousarray(rows.transpose(1, 0, 2)).reshape(-1)
        return np.einsum("ry,rzx->zyx", self._wy, rows).reshape(-1)

    def _apply(self, x):
        img = self._to_rows(x)
        sino = np.zeros((self.geometry.n_views, self._n_rows, self.geometry.n_bins))
        _joseph_forward(img, self._x0, self._z0, self._hx, self._hz, *self._rays, sino)
        return sino.reshape(-1)

    def _adjoint(self, y):
        sino = np.ascontiguousarray(y.reshape(self.geometry.n_views, self._n_rows, self.geometry.n_bins))
        img = np.zeros((self._n_rows, self.grid.n("z"), self.grid.n("x")))
        _joseph_adjoint(sino, self._x0, self._z0, self._hx, self._hz, *self._rays, img)
        return self._from_rows(img)


def make_projector(grid: GridSpec, geom: ScanGeometry) -> FanBeamProjector:
    return FanBeamProjector(grid, geom)


class FiniteDifference(LinearOperator):
    """Forward difference ``f[i+1] - f[i]`` in unit grid steps along one axis.

    The last slice along the axis is set to zero, so ``||D|| < 2``.
    """

    def __init__(self, grid: GridSpec, axis: str):
        ax = grid.array_axis(axis)
        if grid.shape[ax] < 2:
            raise ValueError(f"need at least 2 samples along {axis}")
        super().__init__(grid.size, grid.size)
        self.grid = grid
        self.axis = axis
        self._ax = ax

    def _apply(self, x):
        f = x.reshape(self.grid.shape)
        out = np.zeros_like(f)
        n = f.shape[self._ax]
        lo = [slice(None)] * f.ndim
        hi = [slice(None)] * f.ndim
        lo[self._ax] = slice(0, n - 1)
        hi[self._ax] = slice(1, n)
        out[tuple(lo)] = f[tuple(hi)] - f[tuple(lo)]
        return out.reshape(-1)

    def _adjoint(self, y):
        g = y.reshape(self.grid.shape).copy()
        n = g.shape[self._ax]
        last = [slice(None)] * g.ndim
        last[self._ax] = n - 1
        g[tuple(last)] = 0.0
        out = -g
        lo = [slice(None)] * g.ndim
        hi = [slice(None)] * g.ndim
        lo[self._ax] = slice(0, n - 1)
        hi[self._ax] = slice(1, n)
        out[tuple(hi)] += g[tuple(lo)]
        return out.reshape(-1)


def make_finite_diff(grid: GridSpec, axis: str) -> FiniteDifference:
    return FiniteDifference(grid, axis)


class DirectionalDifference(LinearOperator):
    """``cos(theta) Dx + sin(theta) Dz``; theta in degrees from the x axis."""

    def __init__(self, grid: GridSpec, theta: float):
        super().__init__(grid.size, grid.size)
        self.grid = grid
        self.theta = float(theta)
        self.dx = FiniteDifference(grid, "x")
        self.dz = FiniteDifference(grid, "z")
        t = np.deg2rad(self.theta)
        self.c = float(np.cos(t))
        self.s = float(np.sin(t))

    def _apply(self, x):
        return self.c * self.dx._apply(x) + self.s * self.dz._apply(x)

    def _adjoint(self, y):
        return self.c * self.dx._adjoint(y) + self.s * self.dz._adjoint(y)


def make_directional_diff(grid: GridSpec, theta: float) -> DirectionalDifference:
    return DirectionalDifference(grid, theta)


def hanning_multiplier(n_bins: int, c: float, ramp: bool = False) -> np.ndarray:
    """Hanning window ``0.5 (1 + cos(pi nu / (c nu_nyq)))`` on the rfft grid.

    Zero above ``c`` times Nyquist.  With ``ramp`` the window is multiplied by
    ``|nu| / nu_nyq`` (the apodized ramp used for FBP).
    """
    if not 0 < c <= 1:
        raise ValueError("cutoff c must lie in (0, 1]")
    nu = np.fft.rfftfreq(n_bins)  # cycles per bin; Nyquist = 0.5
    rel = nu / (0.5 * c)
    h = np.where(rel <= 1.0, 0.5 * (1.0 + np.cos(np.pi * np.minimum(rel, 1.0))), 0.0)
    if ramp:
        h = h * nu / 0.5
    return h


class HanningSqrtFilter(LinearOperator):
    """Square root of the Hanning filter applied along the detector axis.

    Circular (unpadded) filtering with a real, even multiplier, so the
    operator is symmetric and two passes equal one Hanning pass exactly in
    the frequency domain.
    """

    def __init__(self, geom: ScanGeometry, c: float = 0.5, ramp: bool = False):
        if geom.n_bins < 2:
            raise ValueError("filter needs n_bins >= 2")
        super().__init__(geom.size, geom.size)
        self.geometry = geom
        self.c = float(c)
        self.ramp = ramp
        self.multiplier = np.sqrt(hanning_multiplier(geom.n_bins, c, ramp))

    def _apply(self, x):
        s = x.reshape(-1, self.geometry.n_bins)
        out = np.fft.irfft(np.fft.rfft(s, axis=-1) * self.multiplier, n=self.geometry.n_bins, axis=-1)
        return out.reshape(-1)

    _adjoint = _apply


def make_hanning_sqrt_filter(geom: ScanGeometry, c: float = 0.5, ramp: bool = False) -> HanningSqrtFilter:
    return HanningSqrtFilter(geom, c, ramp)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Unit-sum Gaussian sampled on integers, truncated at 4 sigma."""
    if sigma < 0:
        raise ValueError("negative Gaussian width")
    if sigma == 0:
        return np.ones(1)
    r = int(math.ceil(4.0 * sigma))
    t = np.arange(-r, r + 1)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _blur(arr, kernels, axes):
    out = arr
    for k, ax in zip(kernels, axes):
        if k.size > 1:
            out = ndimage.correlate1d(out, k, axis=ax, mode="constant", cval=0.0)
    return out


class GaussianBlur(LinearOperator):
    """Separable Gaussian blur with zero boundaries.

    ``d`` gives the standard deviation per axis in cm, in axis-name order.
    """

    def __init__(self, grid: GridSpec, d):
        d = tuple(float(v) for v in (d if np.iterable(d) else (d,) * grid.ndim))
        if len(d) != grid.ndim:
            raise ValueError("one width per grid axis")
        if min(d) < 0:
            raise ValueError("Gaussian widths must be non-negative")
        super().__init__(grid.size, grid.size)
        self.grid = grid
        self.d = d
        self._kernels = [gaussian_kernel(w / h) for w, h in zip(d, grid.spacing)]
        self._axes = [grid.array_axis(a) for a in grid.axes]

    @property
    def is_identity(self) -> bool:
        return all(k.size == 1 for k in self._kernels)

    def _apply(self, x):
        return _blur(x.reshape(self.grid.shape), self._kernels, self._axes).reshape(-1)

    _adjoint = _apply


def make_gaussian_blur(grid: GridSpec, d) -> GaussianBlur:
    return GaussianBlur(grid, d)


def blur_sinogram(values: np.ndarray, geom: ScanGeometry, width) -> np.ndarray:
    """Blur projection data along the detector (and rows in 3-D).

    ``width`` is the standard deviation in cm: a scalar, or ``(row, bin)``.
    """
    width = tuple(np.broadcast_to(np.asarray(width, dtype=float), (2,)))
    values = np.asarray(values, dtype=float).reshape(geom.shape)
    kernels = [gaussian_kernel(width[1] / geom.bin_width)]
    axes = [values.ndim - 1]
    if geom.is_3d:
        kernels.append(gaussian_kernel(width[0] / geom.row_height))
        axes.append(1)
    return _blur(values, kernels, axes)
