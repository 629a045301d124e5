import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from stackpdhg.geometry import GridSpec, ScanGeometry, default_geometry
from stackpdhg.linop import adjoint_mismatch, compose, op_norm
from stackpdhg.tomo_ops import (blur_sinogram, gaussian_kernel, hanning_multiplier,
                                make_directional_diff, make_finite_diff, make_gaussian_blur,
                                make_hanning_sqrt_filter, make_projector)


def _hat_matrix(grid, geom):
    """Projector matrix built voxel by voxel from the hat-function form of
    linear interpolation (independent of the numba kernels)."""
    sx, sz, ux, uz = geom.rays()
    xc, zc = grid.coords("x"), grid.coords("z")
    hx, hz = grid.step("x"), grid.step("z")
    M = np.zeros((geom.size, grid.size))
    row = 0
    for v in range(geom.n_views):
        for b in range(geom.n_bins):
            dx, dz = ux[v, b], uz[v, b]
            for j, z in enumerate(zc):
                for i, x in enumerate(xc):
                    if abs(dx) * hz >= abs(dz) * hx:
                        zr = sz[v] + (x - sx[v]) / dx * dz
                        w = hx / abs(dx) * max(0.0, 1.0 - abs(zr - z) / hz)
                    else:
                        xr = sx[v] + (z - sz[v]) / dz * dx
                        w = hz / abs(dz) * max(0.0, 1.0 - abs(xr - x) / hx)
                    M[row, j * grid.n("x") + i] = w
            row += 1
    return M


def test_projector_matches_hat_oracle():
    grid = GridSpec((8, 8), 0.5)
    geom = default_geometry(grid, n_views=3, n_bins=12)
    X = make_projector(grid, geom)
    assert np.allclose(X.to_dense(), _hat_matrix(grid, geom), rtol=0, atol=1e-12)


def test_projector_zero_and_errors():
    grid = GridSpec((8, 8), 1.0)
    geom = default_geometry(grid, n_views=3)
    assert not np.any(make_projector(grid, geom).apply(np.zeros(64)))
    with pytest.raises(ValueError):
        make_projector(grid, ScanGeometry(3, 25, 4.0, 16.0, 16, 1.0))
    with pytest.raises(ValueError):
        make_projector(GridSpec((4, 4, 4), 1.0), geom)


def test_projector_transpose_bitwise():
    for grid, nv in [(GridSpec((16, 16), 0.25), 5), (GridSpec((6, 4, 5), 1.0), 3)]:
        geom = default_geometry(grid, n_views=nv)
        X = make_projector(grid, geom)
        fwd = X.to_dense()
        back = np.column_stack([X.adjoint(e) for e in np.eye(X.codomain_len)])
        assert np.array_equal(back, fwd.T)


def test_disk_chord_lengths():
    n, r, mu = 128, 3.0, 0.7
    grid = GridSpec((n, n), 8.0 / n)
    xx, zz = grid.mesh()
    img = mu * ((xx ** 2 + zz ** 2) <= r * r)
    geom = default_geometry(grid, n_views=1, n_bins=256)
    prof = make_projector(grid, geom).apply(img.ravel())
    sx, sz, ux, uz = geom.rays()
    s = np.abs(sx[0] * uz[0] - sz[0] * ux[0])      # ray distance from the disk center
    inner = s <= 0.8 * r
    exact = 2 * np.sqrt(r * r - s[inner] ** 2) * mu
    assert np.max(np.abs(prof[inner] - exact) / exact) < 0.02


def test_finite_diff_examples():
    grid = GridSpec((4, 3), 1.0)
    dx = make_finite_diff(grid, "x")
    assert not np.any(dx.apply(np.full(12, 3.7)))
    ramp = np.tile(np.arange(4.0), 3)
    assert np.array_equal(dx.apply(ramp).reshape(3, 4), np.tile([1.0, 1, 1, 0], (3, 1)))
    with pytest.raises(ValueError):
        make_finite_diff(grid, "y")
    with pytest.raises(ValueError):
        make_finite_diff(GridSpec((4, 1), 1.0), "z")


def test_finite_diff_norm_dense_oracle():
    grid = GridSpec((64, 64), 1.0)
    D = make_finite_diff(grid, "x")
    G = D.to_dense()
    ref = float(np.sqrt(scipy.linalg.eigvalsh(G.T @ G, subset_by_index=[4095, 4095])[0]))
    est = op_norm(D, tol=1e-14, max_iter=200000)
    assert abs(est - ref) <= 1e-6 * ref
    assert est < 2


def test_directional_diff():
    grid = GridSpec((10, 12), 1.0)
    rng = np.random.default_rng(0)
    f = rng.standard_normal(grid.size)
    dx, dz = make_finite_diff(grid, "x"), make_finite_diff(grid, "z")
    assert np.array_equal(make_directional_diff(grid, 0).apply(f), dx.apply(f))
    xx, zz = grid.mesh()
    only_x = (xx + 0 * zz).ravel()
    assert np.allclose(make_directional_diff(grid, 90).apply(only_x), 0, atol=1e-15)
    plane = (xx - zz).ravel()
    out = make_directional_diff(grid, 45).apply(plane).reshape(grid.shape)
    assert np.allclose(out[:-1, :-1], 0, atol=1e-14)
    for theta in (-25.0, 13.0, 77.0):
        t = np.deg2rad(theta)
        D = make_directional_diff(grid, theta)
        assert np.array_equal(D.apply(f), np.cos(t) * dx.apply(f) + np.sin(t) * dz.apply(f))


def test_hanning_filter():
    geom = ScanGeometry(3, 25, 40, 20, 32, 0.5)
    R = make_hanning_sqrt_filter(geom, 0.5)
    const = np.full(geom.size, 2.5)
    assert np.allclose(R.apply(const), const, rtol=1e-14)
    rng = np.random.default_rng(1)
    g = rng.standard_normal(geom.shape)
    twice = R.apply(R.apply(g.ravel())).reshape(geom.shape)
    spec = np.fft.rfft(twice, axis=-1)
    expect = np.fft.rfft(g, axis=-1) * hanning_multiplier(geom.n_bins, 0.5)
    assert np.max(np.abs(spec - expect)) <= 1e-12 * np.max(np.abs(expect))
    with pytest.raises(ValueError):
        make_hanning_sqrt_filter(geom, 0.0)
    with pytest.raises(ValueError):
        make_hanning_sqrt_filter(geom, 1.5)


def test_hanning_multiplier_values():
    h = hanning_multiplier(16, 1.0)
    nu = np.fft.rfftfreq(16)
    assert h[0] == 1.0
    assert np.allclose(h, 0.5 * (1 + np.cos(np.pi * nu / 0.5)), atol=1e-15)
    h = hanning_multiplier(16, 0.5)
    assert np.all(h[nu > 0.25] == 0)


def test_gaussian_blur():
    grid = GridSpec((21, 19), 0.1)
    assert make_gaussian_blur(grid, (0, 0)).is_identity
    f = np.random.default_rng(2).standard_normal(grid.size)
    assert np.array_equal(make_gaussian_blur(grid, (0, 0)).apply(f), f)
    G = make_gaussian_blur(grid, (0.2, 0.15))
    delta = np.zeros(grid.shape)
    delta[9, 10] = 1.0
    out = G.apply(delta.ravel()).reshape(grid.shape)
    assert out.sum() == pytest.approx(1.0, abs=1e-14)
    kz, kx = gaussian_kernel(1.5), gaussian_kernel(2.0)
    assert np.allclose(out[9 - 6:9 + 7, 10 - 8:10 + 9], np.outer(kz, kx), atol=1e-16)
    const = G.apply(np.ones(grid.size)).reshape(grid.shape)
    assert np.allclose(const[8:11, 9:12], 1.0, atol=1e-14)
    with pytest.raises(ValueError):
        make_gaussian_blur(grid, (-1, 0))


def test_blur_sinogram_preserves_interior_sum():
    geom = ScanGeometry(2, 25, 40, 20, 64, 0.1)
    g = np.zeros(geom.shape)
    g[:, 32] = 1.0
    out = blur_sinogram(g, geom, 0.2)
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-14)


def _all_operators():
    g2 = GridSpec((12, 10), 0.5)
    g3 = GridSpec((8, 6, 5), 0.5)
    geo2 = default_geometry(g2, n_views=5)
    geo3 = default_geometry(g3, n_views=3)
    geo3b = ScanGeometry(**{**geo3.to_dict(), "n_rows": 4, "row_height": 0.6})
    from stackpdhg.linop import identity, stack
    X2 = make_projector(g2, geo2)
    R2 = make_hanning_sqrt_filter(geo2, 0.5)
    ops = {
        "projector2d": X2,
        "projector3d": make_projector(g3, geo3),
        "projector3d_rows": make_projector(g3, geo3b),
        "dx": make_finite_diff(g3, "x"),
        "dy": make_finite_diff(g3, "y"),
        "dz": make_finite_diff(g3, "z"),
        "dtheta": make_directional_diff(g2, -25.0),
        "filter": R2,
        "filter_ramp": make_hanning_sqrt_filter(geo2, 0.8, ramp=True),
        "blur": make_gaussian_blur(g3, (0.4, 0.6, 0.3)),
        "identity": identity(17),
        "composed": compose(R2, X2),
        "composed3d": compose(compose(make_hanning_sqrt_filter(geo3), make_projector(g3, geo3)),
                              make_gaussian_blur(g3, (0.5, 0.5, 0.5))),
        "stack": stack([compose(R2, X2), make_finite_diff(g2, "x"), identity(g2.size)],
                       [3.0, 2.0, 1.0], [1.0, 0.3, 7.0]),
    }
    return ops


@pytest.mark.parametrize("name", list(_all_operators()))
def test_adjoint_every_operator(name):
    assert adjoint_mismatch(_all_operators()[name], n_pairs=20) <= 1e-10


@settings(max_examples=20, deadline=None)
@given(nx=st.integers(3, 12), nz=st.integers(3, 12), nv=st.integers(1, 6),
       arc=st.floats(0, 60), theta=st.floats(-90, 90), seed=st.integers(0, 1000))
def test_adjoint_random_geometries(nx, nz, nv, arc, theta, seed):
    grid = GridSpec((nx, nz), 0.3)
    geom = default_geometry(grid, n_views=nv, arc_half_angle=arc)
    assert adjoint_mismatch(make_projector(grid, geom), 3, seed) <= 1e-10
    assert adjoint_mismatch(make_directional_diff(grid, theta), 3, seed) <= 1e-10
