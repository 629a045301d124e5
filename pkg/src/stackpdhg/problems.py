"""Reconstruction problems built on the stacked PDHG solver, plus the
least-squares baselines they are compared against.

The directional-TV problem is::

    min_f  sum_j alpha_j ||D_j f||_1
    s.t.   ||R (X G f - g)||_2 <= eps * sqrt(size(g)),   f >= 0

with ``D_j`` ranging over ``Dx``, (``Dy`` in 3-D), the directional
differences at the two ends of the scanning arc, and the identity.  ``R`` is
the square-root Hanning filter and ``G`` an optional Gaussian blur of the
latent image (3-D only).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator as _SciPyOp, cg

from .geometry import GridSpec, ImageGrid, ScanGeometry, Sinogram
from .linop import LinearOperator, compose, identity, op_norm
from .pdhg import DataBallTerm, L1Term, ProblemSpec, StepConfig, solve
from .tomo_ops import (make_directional_diff, make_finite_diff, make_gaussian_blur,
                       make_hanning_sqrt_filter, make_projector)

__all__ = [
    "DTVConfig",
    "HighResConfig",
    "TwoStageResult",
    "build_dtv_2d",
    "build_dtv_3d",
    "data_operator",
    "lsq_tik",
    "solve_lsq_tik",
    "data_discrepancy",
    "dtv_theta",
    "gradient_descent_lsq",
    "fbp_first_iterate",
    "lsq_tik_highres",
    "upsample_nearest",
    "two_stage_pipeline",
]

_ALPHA_KEYS = {2: ("x", "a", "b", "l1"), 3: ("x", "y", "a", "b", "l1")}


@dataclass
class DTVConfig:
    """Penalty weights and data constraint.

    ``alphas`` maps ``x``, ``a``, ``b``, ``l1`` (and ``y`` in 3-D) to weights
    that must sum to one.  ``theta_a``/``theta_b`` default to the ends of the
    scanning arc.  ``d`` is the latent-image blur (standard deviation in cm
    per axis, 3-D problems only).
    """

    alphas: dict
    epsilon: float
    c: float = 0.5
    theta_a: float | None = None
    theta_b: float | None = None
    d: tuple | None = None
    ramp: bool = False

    def __post_init__(self):
        self.alphas = {k: float(v) for k, v in self.alphas.items()}
        unknown = set(self.alphas) - set(_ALPHA_KEYS[3])
        if unknown:
            raise ValueError(f"unknown penalty names {sorted(unknown)}")
        if any(v < 0 for v in self.alphas.values()):
            raise ValueError("penalty weights must be non-negative")
        if abs(sum(self.alphas.values()) - 1.0) > 1e-9:
            raise ValueError(f"penalty weights must sum to 1, got {sum(self.alphas.values())!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.d is not None and min(self.d) < 0:
            raise ValueError("blur widths must be non-negative")

    @classmethod
    def normalized(cls, alphas: dict, **kw) -> "DTVConfig":
        """Rescale ``alphas`` to unit sum (the solution does not change)."""
        s = sum(alphas.values())
        return cls({k: v / s for k, v in alphas.items()}, **kw)

    def angles(self, geom: ScanGeometry) -> tuple:
        a = -geom.arc_half_angle if self.theta_a is None else self.theta_a
        b = geom.arc_half_angle if self.theta_b is None else self.theta_b
        return float(a), float(b)

    def to_dict(self) -> dict:
        return {"alphas": dict(self.alphas), "epsilon": self.epsilon, "c": self.c,
                "theta_a": self.theta_a, "theta_b": self.theta_b,
                "d": None if self.d is None else list(self.d), "ramp": self.ramp}

    @classmethod
    def from_dict(cls, d: dict) -> "DTVConfig":
        d = dict(d)
        if d.get("d") is not None:
            d["d"] = tuple(d["d"])
        return cls(**d)


_NORM_CACHE: dict = {}


def _cached_norm(key, factory, tol: float) -> float:
    key = key + (tol,)
    if key not in _NORM_CACHE:
        _NORM_CACHE[key] = op_norm(factory(), tol=tol)
    return _NORM_CACHE[key]


def data_operator(grid: GridSpec, geom: ScanGeometry, c: float = 0.5, d=None,
                  ramp: bool = False) -> LinearOperator:
    """``R[c] X`` (or ``R[c] X G[d]`` when ``d`` is non-zero)."""
    op = compose(make_hanning_sqrt_filter(geom, c, ramp), make_projector(grid, geom))
    if d is not None and max(d) > 0:
        op = compose(op, make_gaussian_blur(grid, d))
    return op


def _build(geom, grid, g, cfg: DTVConfig, axes, norm_tol, drop_zero):
    if isinstance(g, Sinogram):
        g = g.values
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    if g.size != geom.size:
        raise ValueError(f"data has {g.size} values, geometry expects {geom.size}")
    d = cfg.d if grid.ndim == 3 else None
    if d is not None and len(d) != grid.ndim:
        raise ValueError("blur width needs one value per grid axis")
    Xp = data_operator(grid, geom, cfg.c, d, cfg.ramp)
    L_s = _cached_norm(("data", grid, geom, cfg.c, cfg.ramp, None if d is None else tuple(d)),
                       lambda: Xp, norm_tol)
    filt = make_hanning_sqrt_filter(geom, cfg.c, cfg.ramp)
    center = filt.apply(g) / L_s
    radius = cfg.epsilon * math.sqrt(g.size) / L_s
    blocks, norms, terms, names = [Xp], [L_s], [DataBallTerm(center, radius, L_s, g.size)], ["data"]

    theta_a, theta_b = cfg.angles(geom)
    for name in axes:
        alpha = cfg.alphas.get(name, 0.0)
        if drop_zero and alpha == 0.0:
            continue
        if name in ("x", "y"):
            op = make_finite_diff(grid, name)
            key = ("diff", grid, name)
        elif name in ("a", "b"):
            theta = theta_a if name == "a" else theta_b
            op = make_directional_diff(grid, theta)
            key = ("ddiff", grid, theta)
        else:
            op = identity(grid.size)
            key = None
        L = 1.0 if key is None else _cached_norm(key, lambda op=op: op, norm_tol)
        blocks.append(op)
        norms.append(L)
        terms.append(L1Term(alpha, L))
        names.append(name)
    from .linop import stack
    K = stack(blocks, norms)
    meta = {"grid": grid, "geometry": geom, "config": cfg, "data": g, "filter": filt}
    problem = ProblemSpec(K, terms, nonneg=True, names=names)
    problem.meta = meta
    return problem


def build_dtv_2d(geom: ScanGeometry, grid: GridSpec, g, cfg: DTVConfig,
                 norm_tol: float = 1e-6, drop_zero: bool = True) -> ProblemSpec:
    """Blocks ``[R X, Dx, D_a, D_b, I]``; blocks whose weight is zero are
    left out unless ``drop_zero`` is false."""
    if grid.ndim != 2:
        raise ValueError("build_dtv_2d needs a 2-D grid")
    extra = set(cfg.alphas) - set(_ALPHA_KEYS[2])
    if any(cfg.alphas[k] for k in extra):
        raise ValueError(f"penalties {sorted(extra)} do not apply to 2-D problems")
    return _build(geom, grid, g, cfg, _ALPHA_KEYS[2], norm_tol, drop_zero)


def build_dtv_3d(geom: ScanGeometry, grid: GridSpec, g, cfg: DTVConfig,
                 norm_tol: float = 1e-6, drop_zero: bool = True) -> ProblemSpec:
    """Blocks ``[R X G, Dx, Dy, D_a, D_b, I]``."""
    if grid.ndim != 3:
        raise ValueError("build_dtv_3d needs a 3-D grid")
    return _build(geom, grid, g, cfg, _ALPHA_KEYS[3], norm_tol, drop_zero)


# ---------------------------------------------------------------- baselines


def data_discrepancy(X: LinearOperator, f, g) -> float:
    """Relative data misfit ``||X f - g|| / ||g||``."""
    g = np.asarray(g, dtype=float).reshape(-1)
    return float(np.linalg.norm(X.apply(f) - g) / np.linalg.norm(g))


def lsq_tik(X: LinearOperator, g, alpha: float, x0=None, rtol: float = 1e-10,
            max_iter: int = 20000) -> np.ndarray:
    """Minimize ``0.5 ||X f - g||^2 + 0.5 alpha ||f||^2`` by CG on the normal
    equations."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    g = np.asarray(g, dtype=float).reshape(-1)
    n = X.domain_len
    A = _SciPyOp((n, n), matvec=lambda v: X.adjoint(X.apply(v)) + alpha * v, dtype=np.float64)
    b = X.adjoint(g)
    f, info = cg(A, b, x0=x0, rtol=rtol, atol=0.0, maxiter=max_iter)
    if info > 0:
        raise RuntimeError(f"CG did not converge in {max_iter} iterations (alpha={alpha:g})")
    return f


def solve_lsq_tik(geom: ScanGeometry, grid: GridSpec, g, alpha_tik: float | None = None,
                  target_rmse: float | None = None, rel_tol: float = 0.05,
                  X: LinearOperator | None = None):
    """LSQ-Tik reconstruction.

    With ``target_rmse`` the weight is bisected (in log scale) until the
    relative data discrepancy ``||X f - g|| / ||g||`` is within ``rel_tol``
    of the target.  Returns ``(image, alpha_tik, discrepancy)``.
    """
    if alpha_tik is None and target_rmse is None:
        raise ValueError("give alpha_tik or target_rmse")
    if isinstance(g, Sinogram):
        g = g.values
    g = np.asarray(g, dtype=float).reshape(-1)
    X = make_projector(grid, geom) if X is None else X
    if target_rmse is None:
        f = lsq_tik(X, g, alpha_tik)
        return ImageGrid(grid, f), alpha_tik, data_discrepancy(X, f, g)

    # Bracketed root finding on log(discrepancy) against log(alpha); the
    # discrepancy grows monotonically with alpha.  Illinois false position
    # keeps the bracket and usually needs far fewer CG solves than bisection.
    L2 = op_norm(X) ** 2
    cache = {}

    def h(la, x0=None):
        f = lsq_tik(X, g, math.exp(la), x0=x0)
        disc = data_discrepancy(X, f, g)
        cache[la] = (f, disc)
        return math.log(disc) - math.log(target_rmse), f, disc

    # walk down from a heavily regularized solve until the target is bracketed
    hi = math.log(L2)
    h_hi, f, disc = h(hi)
    if h_hi < 0:
        raise RuntimeError(f"discrepancy {disc:g} stays below target {target_rmse:g}")
    lo = hi
    for _ in range(16):
        lo = lo - math.log(10.0)
        h_lo, f, disc = h(lo, f)
        if h_lo <= 0:
            break
        hi, h_hi = lo, h_lo
    else:
        raise RuntimeError(f"discrepancy {disc:g} cannot reach target {target_rmse:g}")
    side = 0
    for _ in range(100):
        mid = hi - h_hi * (hi - lo) / (h_hi - h_lo)
        if not lo < mid < hi:
            mid = 0.5 * (lo + hi)
        h_mid, f, disc = h(mid, f)
        if abs(disc - target_rmse) <= rel_tol * target_rmse:
            return ImageGrid(grid, f), math.exp(mid), disc
        if h_mid > 0:
            hi, h_hi = mid, h_mid
            if side == 1:
                h_lo *= 0.5
            side = 1
        else:
            lo, h_lo = mid, h_mid
            if side == -1:
                h_hi *= 0.5
            side = -1
    raise RuntimeError(f"could not tune LSQ-Tik to discrepancy {target_rmse:g}")


def dtv_theta(f: ImageGrid, theta: float) -> float:
    """``||(cos theta Dx + sin theta Dz) f||_1`` of a 2-D image."""
    if f.grid.ndim != 2:
        raise ValueError("DTV(theta) is defined for 2-D images")
    return float(np.abs(make_directional_diff(f.grid, theta).apply(f.values)).sum())


def gradient_descent_lsq(X: LinearOperator, R: LinearOperator, g, f0=None,
                         step: float | None = None, n_iter: int = 1) -> np.ndarray:
    """Gradient descent on ``0.5 ||R (X f - g)||^2``.

    The default step is ``1 / ||R X||^2``.  From ``f0 = 0`` the first iterate
    is ``step * X^T R^T R g``, a filtered backprojection.
    """
    g = np.asarray(g, dtype=float).reshape(-1)
    if step is None:
        step = 1.0 / op_norm(compose(R, X)) ** 2
    if step <= 0:
        raise ValueError("step must be positive")
    f = np.zeros(X.domain_len) if f0 is None else np.asarray(f0, dtype=float).reshape(-1).copy()
    for _ in range(n_iter):
        f = f - step * X.adjoint(R.adjoint(R.apply(X.apply(f) - g)))
        if not np.all(np.isfinite(f)):
            raise FloatingPointError("gradient descent diverged; reduce the step")
    return f


def fbp_first_iterate(X: LinearOperator, R: LinearOperator, g, step: float) -> np.ndarray:
    """``step * X^T R^T R g`` evaluated directly."""
    g = np.asarray(g, dtype=float).reshape(-1)
    return step * X.adjoint(R.adjoint(R.apply(g)))


# ------------------------------------------------------- high-res pipeline


@dataclass
class HighResConfig:
    """High-resolution LSQ-Tik stage.

    ``d`` is the latent blur on the fine grid and ``prior_d`` the blur used
    to form the prior from the upsampled coarse image (both standard
    deviations in cm per axis).
    """

    d: tuple
    prior_d: tuple
    alpha_tik: float = 0.05
    n_iter: int = 10
    c: float = 0.5
    ramp: bool = False


def upsample_nearest(f: ImageGrid, factors) -> ImageGrid:
    factors = tuple(int(k) for k in factors)
    if len(factors) != f.grid.ndim or min(factors) < 1:
        raise ValueError("one integer factor >= 1 per axis")
    v = f.values
    for name, k in zip(f.grid.axes, factors):
        v = np.repeat(v, k, axis=f.grid.array_axis(name))
    return ImageGrid(f.grid.refine(factors), v)


def lsq_tik_highres(X: LinearOperator, R: LinearOperator, G: LinearOperator, g, h0,
                    alpha_tik: float = 0.05, n_iter: int = 10, init=None,
                    step: float | None = None, norm_tol: float = 1e-6) -> np.ndarray:
    """Gradient descent on ``0.5 ||R (X G h - g)||^2 + 0.5 alpha ||G h - h0||^2``.

    Starts from ``init`` (default ``h0``) with the fixed step
    ``1 / (||R X G||^2 + alpha ||G||^2)``.  Returns the latent ``h``.
    """
    g = np.asarray(g, dtype=float).reshape(-1)
    h0 = np.asarray(h0, dtype=float).reshape(-1)
    A = compose(compose(R, X), G)
    if step is None:
        step = 1.0 / (op_norm(A, tol=norm_tol) ** 2 + alpha_tik * op_norm(G, tol=norm_tol) ** 2)
    rg = R.apply(g)
    h = h0.copy() if init is None else np.asarray(init, dtype=float).reshape(-1).copy()
    for _ in range(n_iter):
        grad = A.adjoint(A.apply(h) - rg) + alpha_tik * G.adjoint(G.apply(h) - h0)
        h = h - step * grad
    return h


def lsq_tik_highres_objective(X, R, G, g, h0, alpha_tik, h) -> float:
    A = compose(compose(R, X), G)
    r = A.apply(h) - R.apply(np.asarray(g, dtype=float).reshape(-1))
    p = G.apply(h) - np.asarray(h0, dtype=float).reshape(-1)
    return 0.5 * float(r @ r) + 0.5 * alpha_tik * float(p @ p)


@dataclass
class TwoStageResult:
    low: ImageGrid           # coarse latent image from the DTV solve
    prior: ImageGrid         # upsampled and blurred coarse image, h0
    high_latent: ImageGrid   # fine latent h after gradient descent
    high: ImageGrid          # fine object image G[d] h
    log: object = None

    def __iter__(self):
        return iter((self.low, self.high))


def two_stage_pipeline(geom: ScanGeometry, g, low_grid: GridSpec, low_cfg: DTVConfig,
                       factors, hr_cfg: HighResConfig, steps: StepConfig,
                       n_iter_low: int = 500, zero_init: bool = False,
                       low: ImageGrid | None = None, truth=None) -> TwoStageResult:
    """Coarse DTV solve, nearest-neighbor upsampling, Gaussian blur to form
    the prior ``h0``, then a few gradient steps of high-resolution LSQ-Tik.

    ``zero_init`` runs the comparison branch with ``h0 = 0``.  A coarse
    result computed earlier may be passed as ``low``.
    """
    if isinstance(g, Sinogram):
        g = g.values
    g = np.asarray(g, dtype=float).reshape(-1)
    log = None
    if low is None and not zero_init:
        problem = (build_dtv_3d if low_grid.ndim == 3 else build_dtv_2d)(geom, low_grid, g, low_cfg)
        state, log = solve(problem, steps, n_iter_low, truth=truth)
        low = ImageGrid(low_grid, state.x)
    hi_grid = low_grid.refine(factors)
    if zero_init:
        prior = ImageGrid(hi_grid)
    else:
        up = upsample_nearest(low, factors)
        prior = up.with_values(make_gaussian_blur(hi_grid, hr_cfg.prior_d).apply(up.values))
    X = make_projector(hi_grid, geom)
    R = make_hanning_sqrt_filter(geom, hr_cfg.c, hr_cfg.ramp)
    G = make_gaussian_blur(hi_grid, hr_cfg.d)
    h = lsq_tik_highres(X, R, G, g, prior.values, hr_cfg.alpha_tik, hr_cfg.n_iter)
    return TwoStageResult(low if low is not None else ImageGrid(low_grid), prior,
                          ImageGrid(hi_grid, h), ImageGrid(hi_grid, G.apply(h)), log)
