"""Image grids, arc scan geometry and sinograms.

Conventions
-----------
* ``dims`` lists the grid size in axis-name order: ``(nx, nz)`` in 2D and
  ``(nx, ny, nz)`` in 3D.  Arrays are stored x-fastest, so ``values`` has
  shape ``dims[::-1]``: ``(nz, nx)`` or ``(nz, ny, nx)``.
* ``z`` is the depth direction.  The source sits above the object (positive
  z) and sweeps an arc in the x-z plane; ``y`` runs perpendicular to that
  plane and indexes detector rows in 3D.
* Lengths are in cm, attenuation values in 1/cm.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = ["GridSpec", "ImageGrid", "ScanGeometry", "Sinogram", "default_geometry"]

_AXES = {2: ("x", "z"), 3: ("x", "y", "z")}


@dataclass(frozen=True)
class GridSpec:
    dims: tuple
    spacing: tuple
    origin: tuple = None

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) not in (2, 3):
            raise ValueError("grids are 2-D or 3-D")
        spacing = self.spacing
        if np.isscalar(spacing):
            spacing = (spacing,) * len(dims)
        spacing = tuple(float(s) for s in spacing)
        origin = (0.0,) * len(dims) if self.origin is None else tuple(float(o) for o in self.origin)
        if len(spacing) != len(dims) or len(origin) != len(dims):
            raise ValueError("dims, spacing and origin must have equal length")
        if min(dims) < 1:
            raise ValueError("grid dims must be positive")
        if min(spacing) <= 0:
            raise ValueError("grid spacing must be positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def axes(self) -> tuple:
        return _AXES[self.ndim]

    @property
    def shape(self) -> tuple:
        """Array shape (x fastest)."""
        return self.dims[::-1]

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def array_axis(self, name: str) -> int:
        if name not in self.axes:
            raise ValueError(f"axis {name!r} not in a {self.ndim}-D grid")
        return self.ndim - 1 - self.axes.index(name)

    def n(self, name: str) -> int:
        return self.dims[self.axes.index(name)]

    def step(self, name: str) -> float:
        return self.spacing[self.axes.index(name)]

    def coords(self, name: str) -> np.ndarray:
        """Voxel-center coordinates along one axis."""
        i = self.axes.index(name)
        n, h, o = self.dims[i], self.spacing[i], self.origin[i]
        return o + (np.arange(n) - (n - 1) / 2.0) * h

    def extent(self, name: str) -> float:
        return self.n(name) * self.step(name)

    def mesh(self):
        """Coordinate arrays broadcastable against ``values`` in axis-name order."""
        out = []
        for name in self.axes:
            c = self.coords(name)
            shape = [1] * self.ndim
            shape[self.array_axis(name)] = c.size
            out.append(c.reshape(shape))
        return out

    def refine(self, factors) -> "GridSpec":
        factors = tuple(int(f) for f in factors)
        return GridSpec(
            tuple(n * f for n, f in zip(self.dims, factors)),
            tuple(h / f for h, f in zip(self.spacing, factors)),
            self.origin,
        )

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "spacing": list(self.spacing), "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["dims"]), tuple(d["spacing"]) if not np.isscalar(d["spacing"]) else d["spacing"],
                   None if d.get("origin") is None else tuple(d["origin"]))


@dataclass
class ImageGrid:
    grid: GridSpec
    values: np.ndarray = None

    def __post_init__(self):
        if self.values is None:
            self.values = np.zeros(self.grid.shape)
        self.values = np.asarray(self.values)
        if self.values.size != self.grid.size:
            raise ValueError(f"values have {self.values.size} elements, grid has {self.grid.size}")
        self.values = self.values.reshape(self.grid.shape)

    @property
    def dims(self):
        return self.grid.dims

    @property
    def spacing(self):
        return self.grid.spacing

    @property
    def origin(self):
        return self.grid.origin

    def ravel(self) -> np.ndarray:
        return self.values.reshape(-1)

    def with_values(self, values) -> "ImageGrid":
        return ImageGrid(self.grid, np.asarray(values).reshape(self.grid.shape))


@dataclass(frozen=True)
class ScanGeometry:
    """Limited-arc fan-beam geometry.

    The source moves on a circle of radius ``source_radius`` about the
    rotation center, over view angles equally spaced in
    ``[-arc_half_angle, +arc_half_angle]`` degrees measured from the +z axis.
    A flat detector of ``n_bins`` bins sits ``detector_radius`` beyond the
    center, opposite the source, and rotates with it.

    ``n_rows = 0`` is a 2-D scan.  ``n_rows > 0`` stacks that many fan-beam
    planes along y with pitch ``row_height`` (3-D, no cone angle).
    ``angle_offset`` (degrees) turns the whole arc; rotating the object
    counter-clockwise in the x-z plane by ``psi`` is equivalent to an
    offset of ``-psi``.
    """

    n_views: int
    arc_half_angle: float
    source_radius: float
    detector_radius: float
    n_bins: int
    bin_width: float
    n_rows: int = 0
    row_height: float = 1.0
    row_origin: float = 0.0
    angle_offset: float = 0.0

    def __post_init__(self):
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        if self.n_bins < 1 or self.bin_width <= 0:
            raise ValueError("detector needs n_bins >= 1 and bin_width > 0")
        if self.source_radius <= 0 or self.detector_radius < 0:
            raise ValueError("bad source/detector radius")
        if self.n_rows < 0 or self.row_height <= 0:
            raise ValueError("bad detector rows")

    @property
    def is_3d(self) -> bool:
        return self.n_rows > 0

    @property
    def shape(self) -> tuple:
        if self.is_3d:
            return (self.n_views, self.n_rows, self.n_bins)
        return (self.n_views, self.n_bins)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def view_angles(self) -> np.ndarray:
        """View angles in degrees."""
        if self.n_views == 1:
            return np.full(1, float(self.angle_offset))
        return self.angle_offset + np.linspace(-self.arc_half_angle, self.arc_half_angle,
                                               self.n_views)

    def bin_centers(self) -> np.ndarray:
        return (np.arange(self.n_bins) - (self.n_bins - 1) / 2.0) * self.bin_width

    def row_centers(self) -> np.ndarray:
        n = max(self.n_rows, 1)
        return self.row_origin + (np.arange(n) - (n - 1) / 2.0) * self.row_height

    def sources(self):
        """Source positions ``(sx, sz)``, one per view."""
        phi = np.deg2rad(self.view_angles)
        return self.source_radius * np.sin(phi), self.source_radius * np.cos(phi)

    def bin_positions(self):
        """Detector bin centers ``(px, pz)``, shape ``(n_views, n_bins)``."""
        phi = np.deg2rad(self.view_angles)[:, None]
        u = self.bin_centers()[None, :]
        px = -self.detector_radius * np.sin(phi) + u * np.cos(phi)
        pz = -self.detector_radius * np.cos(phi) - u * np.sin(phi)
        return px, pz

    def rays(self):
        """Unit ray directions from source to each bin: ``(sx, sz, ux, uz)``."""
        sx, sz = self.sources()
        px, pz = self.bin_positions()
        dx = px - sx[:, None]
        dz = pz - sz[:, None]
        n = np.hypot(dx, dz)
        return sx, sz, dx / n, dz / n

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ScanGeometry":
        return cls(**d)


def default_geometry(grid: GridSpec, n_views: int = 25, arc_half_angle: float = 25.0,
                     n_bins: int | None = None, source_factor: float = 2.0,
                     detector_factor: float = 1.0) -> ScanGeometry:
    """Geometry sized to a grid.

    The source sits ``source_factor`` grid widths from the center and the
    detector ``detector_factor`` widths beyond it, the width being the larger
    of the x and z extents.  The detector spans the
    full fan through the grid's bounding circle, so nothing is truncated.
    In 3-D there is one detector row per y slice.
    """
    width = max(grid.extent("x"), grid.extent("z"))
    r_bound = 0.5 * np.hypot(grid.extent("x"), grid.extent("z"))
    src = source_factor * width
    det = detector_factor * width
    half_fan = np.arcsin(min(r_bound / src, 0.999))
    half_len = (src + det) * np.tan(half_fan)
    if n_bins is None:
        n_bins = 2 * grid.n("x")
    geom = dict(n_views=n_views, arc_half_angle=arc_half_angle, source_radius=src,
                detector_radius=det, n_bins=int(n_bins), bin_width=2 * half_len / n_bins)
    if grid.ndim == 3:
        geom.update(n_rows=grid.n("y"), row_height=grid.step("y"), row_origin=grid.origin[1])
    return ScanGeometry(**geom)


@dataclass
class Sinogram:
    geometry: ScanGeometry
    values: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.values is None:
            self.values = np.zeros(self.geometry.shape)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.size != self.geometry.size:
            raise ValueError("sinogram values do not match the geometry")
        self.values = self.values.reshape(self.geometry.shape)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("sinogram contains non-finite values")

    def ravel(self) -> np.ndarray:
        return self.values.reshape(-1)

    def with_values(self, values) -> "Sinogram":
        return replace(self, values=np.asarray(values).reshape(self.geometry.shape))
