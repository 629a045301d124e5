"""Geometric phantoms with exact line integrals.

Shapes are additive.  2-D kinds are ``ellipse``, ``half_ellipse`` (the
part of an ellipse with non-negative local x) and ``rectangle``; 3-D kinds
are ``ellipsoid`` and ``box``.  ``rotation`` (degrees) turns the shape's
local x axis counter-clockwise in the x-z plane, i.e. about the y axis in
3-D.  Every cut of a 3-D shape at fixed y is a 2-D shape of the same
family, which is how line integrals along the stacked fan-beam planes are
evaluated.
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import GridSpec, ImageGrid, ScanGeometry, Sinogram

__all__ = [
    "Shape",
    "PhantomSpec",
    "rasterize",
    "analytic_sinogram",
    "add_poisson_noise",
    "builtin_phantoms",
    "phantom_grid",
]

_KINDS_2D = ("ellipse", "half_ellipse", "rectangle")
_KINDS_3D = ("ellipsoid", "box")
_CUT = {"ellipsoid": "ellipse", "box": "rectangle"}


@dataclass(frozen=True)
class Shape:
    kind: str
    center: tuple
    semi_axes: tuple
    value: float
    rotation: float = 0.0

    def __post_init__(self):
        if self.kind not in _KINDS_2D + _KINDS_3D:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        nd = 2 if self.kind in _KINDS_2D else 3
        center = tuple(float(c) for c in self.center)
        axes = tuple(float(a) for a in self.semi_axes)
        if len(center) != nd or len(axes) != nd:
            raise ValueError(f"{self.kind} needs {nd} center coordinates and semi-axes")
        if min(axes) <= 0:
            raise ValueError("semi-axes must be positive")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "semi_axes", axes)
        object.__setattr__(self, "value", float(self.value))
        object.__setattr__(self, "rotation", float(self.rotation))

    @property
    def ndim(self) -> int:
        return len(self.center)

    def _local(self, x, z):
        """Coordinates in the shape frame (x-z plane), scaled by nothing."""
        cx, cz = self.center[0], self.center[-1]
        t = np.deg2rad(self.rotation)
        c, s = np.cos(t), np.sin(t)
        dx, dz = x - cx, z - cz
        return c * dx + s * dz, -s * dx + c * dz

    def contains(self, *coords) -> np.ndarray:
        """Indicator at points given in axis-name order (x, z) or (x, y, z)."""
        x, z = coords[0], coords[-1]
        lx, lz = self._local(x, z)
        ax, az = self.semi_axes[0], self.semi_axes[-1]
        if self.kind in ("ellipse", "half_ellipse", "ellipsoid"):
            q = (lx / ax) ** 2 + (lz / az) ** 2
            if self.ndim == 3:
                q = q + ((coords[1] - self.center[1]) / self.semi_axes[1]) ** 2
            inside = q <= 1.0
            if self.kind == "half_ellipse":
                inside = inside & (lx >= 0)
            return inside
        inside = (np.abs(lx) <= ax) & (np.abs(lz) <= az)
        if self.ndim == 3:
            inside = inside & (np.abs(coords[1] - self.center[1]) <= self.semi_axes[1])
        return inside

    def cut(self, y: float):
        """The 2-D shape at height ``y`` (``None`` when the plane misses)."""
        if self.ndim == 2:
            return self
        dy = (y - self.center[1]) / self.semi_axes[1]
        if abs(dy) > 1.0:
            return None
        f = np.sqrt(1.0 - dy * dy) if self.kind == "ellipsoid" else 1.0
        if f == 0.0:
            return None
        return Shape(_CUT[self.kind], (self.center[0], self.center[2]),
                     (self.semi_axes[0] * f, self.semi_axes[2] * f), self.value, self.rotation)

    def chord(self, px, pz, ux, uz) -> np.ndarray:
        """Length of the intersection of the lines ``p + t u`` (unit ``u``)
        with this 2-D shape."""
        lpx, lpz = self._local(px, pz)
        t = np.deg2rad(self.rotation)
        c, s = np.cos(t), np.sin(t)
        lux, luz = c * ux + s * uz, -s * ux + c * uz
        ax, az = self.semi_axes
        if self.kind == "rectangle":
            t0, t1 = _slab(lpx, lux, ax, np.full(np.shape(lpx), -np.inf), np.full(np.shape(lpx), np.inf))
            t0, t1 = _slab(lpz, luz, az, t0, t1)
            return np.maximum(t1 - t0, 0.0)
        qx, qz, vx, vz = lpx / ax, lpz / az, lux / ax, luz / az
        a = vx * vx + vz * vz
        b = qx * vx + qz * vz
        cc = qx * qx + qz * qz - 1.0
        disc = b * b - a * cc
        hit = disc > 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        t0 = np.where(hit, (-b - root) / a, 0.0)
        t1 = np.where(hit, (-b + root) / a, 0.0)
        if self.kind == "half_ellipse":
            t0, t1 = _halfplane(lpx, lux, t0, t1)
        return np.maximum(t1 - t0, 0.0)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "center": list(self.center), "semi_axes": list(self.semi_axes),
                "rotation": self.rotation, "value": self.value}

    @classmethod
    def from_dict(cls, d: dict) -> "Shape":
        return cls(d["kind"], tuple(d["center"]), tuple(d["semi_axes"]), d["value"],
                   d.get("rotation", 0.0))


def _slab(p, u, half, t0, t1):
    # |p + t u| <= half
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (-half - p) / u
        b = (half - p) / u
    lo = np.where(u != 0, np.minimum(a, b), np.where(np.abs(p) <= half, -np.inf, np.inf))
    hi = np.where(u != 0, np.maximum(a, b), np.where(np.abs(p) <= half, np.inf, -np.inf))
    return np.maximum(t0, lo), np.minimum(t1, hi)


def _halfplane(p, u, t0, t1):
    # p + t u >= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        tc = -p / u
    t0 = np.where(u > 0, np.maximum(t0, tc), t0)
    t1 = np.where(u < 0, np.minimum(t1, tc), t1)
    empty = (u == 0) & (p < 0)
    return np.where(empty, 0.0, t0), np.where(empty, 0.0, t1)


@dataclass
class PhantomSpec:
    """Ordered shapes plus the region ``[(lo, hi), ...]`` (axis-name order)
    they are guaranteed to lie in."""

    shapes: list
    bounds: list
    name: str = ""

    def __post_init__(self):
        self.shapes = [s if isinstance(s, Shape) else Shape.from_dict(s) for s in self.shapes]
        self.bounds = [tuple(float(v) for v in b) for b in self.bounds]
        if len(self.bounds) not in (2, 3):
            raise ValueError("bounds must cover 2 or 3 axes")
        if any(hi <= lo for lo, hi in self.bounds):
            raise ValueError("bounds need lo < hi on every axis")
        for s in self.shapes:
            if s.ndim != self.ndim:
                raise ValueError(f"{s.kind} does not belong in a {self.ndim}-D phantom")

    @property
    def ndim(self) -> int:
        return len(self.bounds)

    def scaled(self, factor: float) -> "PhantomSpec":
        """Same shapes with every value multiplied by ``factor``."""
        return PhantomSpec([Shape(s.kind, s.center, s.semi_axes, s.value * factor, s.rotation)
                            for s in self.shapes], self.bounds, self.name)

    def rotated(self, psi: float) -> "PhantomSpec":
        """Rotate counter-clockwise by ``psi`` degrees in the x-z plane about
        the origin.  Bounds are replaced by their rotated bounding box."""
        t = np.deg2rad(psi)
        c, s = np.cos(t), np.sin(t)
        out = []
        for sh in self.shapes:
            x, z = sh.center[0], sh.center[-1]
            xn, zn = c * x - s * z, s * x + c * z
            center = (xn, zn) if sh.ndim == 2 else (xn, sh.center[1], zn)
            out.append(Shape(sh.kind, center, sh.semi_axes, sh.value, sh.rotation + psi))
        (x0, x1), (z0, z1) = self.bounds[0], self.bounds[-1]
        r = max(np.hypot(x, z) for x in (x0, x1) for z in (z0, z1))
        bounds = list(self.bounds)
        bounds[0] = bounds[-1] = (-r, r)
        return PhantomSpec(out, bounds, self.name)

    def to_dict(self) -> dict:
        return {"name": self.name, "bounds": [list(b) for b in self.bounds],
                "shapes": [s.to_dict() for s in self.shapes]}

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls([Shape.from_dict(s) for s in d["shapes"]], d["bounds"], d.get("name", ""))

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_json(cls, path) -> "PhantomSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def phantom_grid(ph: PhantomSpec, dims) -> GridSpec:
    """Grid with ``dims`` voxels exactly covering the phantom's bounds."""
    dims = tuple(int(n) for n in dims)
    if len(dims) != ph.ndim:
        raise ValueError("one grid size per phantom axis")
    spacing = tuple((hi - lo) / n for (lo, hi), n in zip(ph.bounds, dims))
    origin = tuple(0.5 * (lo + hi) for lo, hi in ph.bounds)
    return GridSpec(dims, spacing, origin)


def rasterize(ph: PhantomSpec, grid: GridSpec, supersample: int = 1) -> ImageGrid:
    """Sum of shape values at voxel centers, or averaged over a
    ``supersample**ndim`` sub-grid per voxel."""
    if grid.ndim != ph.ndim:
        raise ValueError("grid and phantom dimensionality differ")
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    mesh = grid.mesh()
    out = np.zeros(grid.shape)
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    for off in itertools.product(offsets, repeat=grid.ndim):
        pts = [m + o * grid.step(name) for m, o, name in zip(mesh, off, grid.axes)]
        for s in ph.shapes:
            out += s.value * s.contains(*pts)
    out /= supersample ** grid.ndim
    return ImageGrid(grid, out)


def analytic_sinogram(ph: PhantomSpec, geom: ScanGeometry) -> Sinogram:
    """Exact line integrals along the projector's rays (one per bin center,
    per detector row in 3-D)."""
    if geom.is_3d != (ph.ndim == 3):
        raise ValueError("geometry and phantom dimensionality differ")
    sx, sz, ux, uz = geom.rays()
    px = np.broadcast_to(sx[:, None], ux.shape)
    pz = np.broadcast_to(sz[:, None], uz.shape)
    if not geom.is_3d:
        out = np.zeros(ux.shape)
        for s in ph.shapes:
            out += s.value * s.chord(px, pz, ux, uz)
        return Sinogram(geom, out)
    out = np.zeros(geom.shape)
    for j, y in enumerate(geom.row_centers()):
        for s in ph.shapes:
            c = s.cut(y)
            if c is not None:
                out[:, j, :] += c.value * c.chord(px, pz, ux, uz)
    return Sinogram(geom, out)


def add_poisson_noise(g, fluence: float, seed: int = 0):
    """Transmission noise: counts ~ Poisson(N0 exp(-g)), returned as
    ``-log(max(counts, 1) / N0)``.  Accepts a :class:`Sinogram` or an array
    and returns the same kind."""
    if not fluence > 0:
        raise ValueError("fluence must be positive")
    vals = g.values if isinstance(g, Sinogram) else np.asarray(g, dtype=float)
    if np.any(vals < 0):
        raise ValueError("line integrals must be non-negative")
    rng = np.random.default_rng(seed)
    counts = rng.poisson(fluence * np.exp(-vals)).astype(np.float64)
    noisy = -np.log(np.maximum(counts, 1.0) / fluence)
    return g.with_values(noisy) if isinstance(g, Sinogram) else noisy


def builtin_phantoms() -> dict:
    """Named phantoms.

    ``breast2d``
        8 x 8 cm slice: half-ellipse background (0.2 /cm) with the chest
        wall at x = -3.5, fibroglandular ellipses, a mass and five
        microcalcification-like disks.  Values stay within [0, 0.6].
    ``shapes3d``
        8 x 8 x 4 cm: background ellipsoid, a column of three spheres at
        (x, y) = (1.5, 0) stacked in z, a box and an oblique ellipsoid.
    ``sphere3d``
        8 x 8 x 4 cm: one sphere of radius 1.2 cm, value 0.4, centered.
    ``disk2d``
        8 x 8 cm: one centered disk of radius 3 cm, value 0.3.
    """
    half = Shape("half_ellipse", (-3.5, 0.0), (7.0, 3.2), 0.2)
    breast = [
        half,
        Shape("ellipse", (-1.0, 0.6), (1.6, 0.7), 0.06, 20.0),
        Shape("ellipse", (0.8, -0.9), (1.2, 0.5), 0.05, -30.0),
        Shape("ellipse", (-1.8, -1.2), (0.9, 0.45), 0.08, 60.0),
        Shape("ellipse", (1.6, 1.1), (0.45, 0.45), 0.12),                # mass
        Shape("rectangle", (0.2, 0.2), (0.6, 0.15), 0.05, 10.0),
    ]
    for i, (x, z) in enumerate([(2.4, -0.3), (2.6, -0.1), (2.5, 0.15), (-2.6, 1.6), (0.1, -2.0)]):
        breast.append(Shape("ellipse", (x, z), (0.06, 0.06), 0.3))
    shapes3d = [
        Shape("ellipsoid", (0.0, 0.0, 0.0), (3.6, 3.6, 1.7), 0.2),
        Shape("ellipsoid", (1.5, 0.0, -1.0), (0.35, 0.35, 0.35), 0.2),
        Shape("ellipsoid", (1.5, 0.0, 0.0), (0.35, 0.35, 0.35), 0.2),
        Shape("ellipsoid", (1.5, 0.0, 1.0), (0.35, 0.35, 0.35), 0.2),
        Shape("box", (-1.5, 1.0, 0.0), (0.6, 0.8, 0.3), 0.1, 15.0),
        Shape("ellipsoid", (-1.0, -1.5, 0.5), (1.0, 0.6, 0.4), 0.08, -25.0),
    ]
    return {
        "breast2d": PhantomSpec(breast, [(-4.0, 4.0), (-4.0, 4.0)], "breast2d"),
        "shapes3d": PhantomSpec(shapes3d, [(-4.0, 4.0), (-4.0, 4.0), (-2.0, 2.0)], "shapes3d"),
        "sphere3d": PhantomSpec([Shape("ellipsoid", (0.0, 0.0, 0.0), (1.2, 1.2, 1.2), 0.4)],
                                [(-4.0, 4.0), (-4.0, 4.0), (-2.0, 2.0)], "sphere3d"),
        "disk2d": PhantomSpec([Shape("ellipse", (0.0, 0.0), (3.0, 3.0), 0.3)],
                              [(-4.0, 4.0), (-4.0, 4.0)], "disk2d"),
    }


def empty_phantom_warning(ph: PhantomSpec):
    if not ph.shapes:
        warnings.warn("phantom has no shapes; outputs will be all zero", stacklevel=2)
