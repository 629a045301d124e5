import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stackpdhg.geometry import GridSpec, ScanGeometry, default_geometry
from stackpdhg.phantom import (PhantomSpec, Shape, add_poisson_noise, analytic_sinogram,
                               builtin_phantoms, empty_phantom_warning, phantom_grid, rasterize)
from stackpdhg.tomo_ops import make_projector

BOX2 = [(-4.0, 4.0), (-4.0, 4.0)]


def _disk(r=1.0, value=1.0, center=(0.0, 0.0)):
    return PhantomSpec([Shape("ellipse", center, (r, r), value)], BOX2)


def test_empty_phantom_is_zero():
    ph = PhantomSpec([], BOX2)
    grid = phantom_grid(ph, (16, 16))
    assert not np.any(rasterize(ph, grid).values)
    assert not np.any(analytic_sinogram(ph, default_geometry(grid, n_views=3)).values)
    with pytest.warns(UserWarning):
        empty_phantom_warning(ph)


def test_unit_disk_center_and_corner():
    ph = _disk()
    img = rasterize(ph, phantom_grid(ph, (33, 33))).values
    assert img[16, 16] == 1.0 and img[0, 0] == 0.0 and img[-1, -1] == 0.0


def test_supersampling_changes_only_boundary():
    ph = _disk(2.0, 0.5)
    grid = phantom_grid(ph, (64, 64))
    a = rasterize(ph, grid).values
    b = rasterize(ph, grid, supersample=4).values
    xx, zz = grid.mesh()
    r = np.hypot(xx, zz)
    changed = a != b
    assert np.any(changed)
    # a voxel can only change if the circle passes within half a diagonal
    assert np.all(np.abs(r[changed] - 2.0) <= grid.step("x") / np.sqrt(2) + 1e-12)
    with pytest.raises(ValueError):
        rasterize(ph, grid, supersample=0)


def test_chord_examples():
    r, mu = 1.5, 0.4
    s = Shape("ellipse", (0.0, 0.0), (r, r), mu)
    # central ray along z and a ray missing the disk
    assert s.chord(np.array([0.0]), np.array([-10.0]), np.array([0.0]), np.array([1.0]))[0] \
        == pytest.approx(2 * r, rel=1e-14)
    assert s.chord(np.array([3.0]), np.array([-10.0]), np.array([0.0]), np.array([1.0]))[0] == 0.0
    geom = ScanGeometry(1, 0.0, 20.0, 10.0, 9, 1.0)
    sino = analytic_sinogram(PhantomSpec([s], BOX2), geom).values
    assert sino[0, 4] == pytest.approx(2 * r * mu, rel=1e-12)
    assert sino[0, 0] == 0.0


def test_rectangle_and_half_ellipse_chords():
    rect = Shape("rectangle", (0.0, 0.0), (1.0, 0.5), 1.0)
    # horizontal ray through the center crosses the full 2.0 width
    assert rect.chord(np.array([-5.0]), np.array([0.0]), np.array([1.0]), np.array([0.0]))[0] \
        == pytest.approx(2.0, rel=1e-14)
    half = Shape("half_ellipse", (0.0, 0.0), (2.0, 1.0), 1.0)
    assert half.chord(np.array([-5.0]), np.array([0.0]), np.array([1.0]), np.array([0.0]))[0] \
        == pytest.approx(2.0, rel=1e-14)
    assert half.contains(np.array(1.0), np.array(0.0)) and not half.contains(np.array(-1.0),
                                                                            np.array(0.0))


def test_analytic_matches_fine_raster():
    ph = builtin_phantoms()["disk2d"]
    fine = phantom_grid(ph, (1024, 1024))
    geom = default_geometry(phantom_grid(ph, (128, 128)), n_views=5, n_bins=128)
    ana = analytic_sinogram(ph, geom).values.ravel()
    disc = make_projector(fine, geom).apply(rasterize(ph, fine).values)
    assert np.sqrt(np.mean((disc - ana) ** 2)) <= 0.01 * np.sqrt(np.mean(ana ** 2))


def test_chords_match_raster_3d():
    ph = builtin_phantoms()["sphere3d"]
    grid = phantom_grid(ph, (64, 64, 32))
    geom = default_geometry(grid, n_views=3, n_bins=64)
    ana = analytic_sinogram(ph, geom).values.ravel()
    disc = make_projector(grid, geom).apply(rasterize(ph, grid, supersample=2).values)
    # coarse voxels (1/10 of the radius): partial-volume error of a few percent
    assert np.sqrt(np.mean((disc - ana) ** 2)) <= 0.05 * np.sqrt(np.mean(ana ** 2))


def test_poisson_large_fluence():
    g = analytic_sinogram(builtin_phantoms()["breast2d"],
                          ScanGeometry(5, 25, 40, 20, 256, 0.05))
    noisy = add_poisson_noise(g, 1e9, seed=1)
    assert np.max(np.abs(noisy.values - g.values)) < 1e-3


def test_poisson_moments():
    n0 = 50000.0
    out = add_poisson_noise(np.zeros(10 ** 5), n0, seed=2)
    assert abs(out.mean()) < 5 * np.sqrt(1 / n0 / 1e5)
    assert out.var() == pytest.approx(1 / n0, rel=0.1)
    for level in (0.5, 2.0):
        out = add_poisson_noise(np.full(10 ** 5, level), n0, seed=3) - level
        assert out.var() == pytest.approx(np.exp(level) / n0, rel=0.1)


def test_poisson_clamp_and_determinism():
    out = add_poisson_noise(np.full(100, 50.0), 10.0, seed=0)
    assert np.all(np.isfinite(out)) and np.all(out == -np.log(1 / 10.0))
    a = add_poisson_noise(np.ones(500), 1e3, seed=9)
    assert np.array_equal(a, add_poisson_noise(np.ones(500), 1e3, seed=9))
    assert not np.array_equal(a, add_poisson_noise(np.ones(500), 1e3, seed=10))
    with pytest.raises(ValueError):
        add_poisson_noise(np.ones(3), 0.0)
    with pytest.raises(ValueError):
        add_poisson_noise(-np.ones(3), 10.0)


def test_builtin_breast_range():
    ph = builtin_phantoms()["breast2d"]
    img = rasterize(ph, phantom_grid(ph, (512, 512))).values
    assert img.min() >= 0.0 and img.max() <= 0.6 and img.max() > 0.2


def test_builtin_sphere_column():
    ph = builtin_phantoms()["shapes3d"]
    spheres = [s for s in ph.shapes if s.kind == "ellipsoid" and len(set(s.semi_axes)) == 1]
    columns = {}
    for s in spheres:
        columns.setdefault((s.center[0], s.center[1]), set()).add(s.center[2])
    assert max(len(z) for z in columns.values()) >= 3


@pytest.mark.parametrize("name", list(builtin_phantoms()))
def test_builtin_shapes_inside_bounds(name):
    ph = builtin_phantoms()[name]
    grid = phantom_grid(ph, (16,) * ph.ndim)
    # a grid padded by one cell on every side has an empty border
    pad = GridSpec(tuple(n + 2 for n in grid.dims), grid.spacing, grid.origin)
    vals = rasterize(ph, pad).values
    border = np.ones(vals.shape, bool)
    border[(slice(1, -1),) * vals.ndim] = False
    assert not np.any(vals[border])


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-2, 2), b=st.floats(-2, 2), seed=st.integers(0, 100))
def test_sinogram_linear_in_values(a, b, seed):
    rng = np.random.default_rng(seed)
    geom = ScanGeometry(4, 25, 40, 20, 32, 0.3)
    shapes = [Shape("ellipse", tuple(rng.uniform(-2, 2, 2)), tuple(rng.uniform(0.2, 1.5, 2)),
                    1.0, float(rng.uniform(0, 180))) for _ in range(3)]
    v1, v2 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)

    def sino(vals):
        return analytic_sinogram(PhantomSpec([Shape(s.kind, s.center, s.semi_axes, v, s.rotation)
                                              for s, v in zip(shapes, vals)], BOX2), geom).values

    lhs = sino(a * v1 + b * v2)
    rhs = a * sino(v1) + b * sino(v2)
    assert np.allclose(lhs, rhs, atol=1e-12 * (1 + np.abs(rhs).max()))


def test_rotation_with_geometry_invariant():
    ph = PhantomSpec([Shape("ellipse", (1.0, 0.5), (1.2, 0.6), 0.3),
                      Shape("rectangle", (-1.0, -1.0), (0.5, 0.8), 0.2)], BOX2)
    geom = ScanGeometry(7, 25, 40, 20, 64, 0.2)
    base = analytic_sinogram(ph, geom).values
    turned = ScanGeometry(**{**geom.to_dict(), "angle_offset": -90.0})
    rot = analytic_sinogram(ph.rotated(90.0), turned).values
    assert np.allclose(rot, base, rtol=0, atol=1e-12)
    assert not np.allclose(analytic_sinogram(ph.rotated(90.0), geom).values, base, atol=1e-3)


def test_cut_of_3d_shapes():
    sph = Shape("ellipsoid", (0.0, 1.0, 0.0), (2.0, 2.0, 2.0), 1.0)
    c = sph.cut(1.0)
    assert c.kind == "ellipse" and c.semi_axes == pytest.approx((2.0, 2.0))
    assert sph.cut(3.5) is None
    box = Shape("box", (0.0, 0.0, 0.0), (1.0, 0.5, 2.0), 1.0)
    assert box.cut(0.2).kind == "rectangle" and box.cut(0.6) is None


def test_json_round_trip(tmp_path):
    for name, ph in builtin_phantoms().items():
        path = tmp_path / f"{name}.json"
        ph.to_json(path)
        assert PhantomSpec.from_json(path) == ph


def test_shape_validation():
    with pytest.raises(ValueError):
        Shape("ellipse", (0.0, 0.0), (1.0, -1.0), 1.0)
    with pytest.raises(ValueError):
        Shape("triangle", (0.0, 0.0), (1.0, 1.0), 1.0)
    with pytest.raises(ValueError):
        PhantomSpec([Shape("ellipse", (0.0, 0.0), (1.0, 1.0), 1.0)], [(-1, 1)] * 3)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        empty_phantom_warning(_disk())
