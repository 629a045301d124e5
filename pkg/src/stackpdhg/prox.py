"""Closed-form proximal maps used by the primal-dual solver.

The maps take their arguments already formed by the caller (for a dual
block, ``lambda + sigma * nu * K_hat x_tilde``) and stay stateless.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "L2BallData",
    "prox_nonneg",
    "prox_l2ball_conj",
    "prox_linf_clip",
    "nonneg_indicator",
    "linf_ball_indicator",
    "scaled_l2_norm",
    "ResolventReport",
    "resolvent_identity_check",
]


@dataclass(frozen=True)
class L2BallData:
    """Constraint ``||y - center||_2 <= radius``."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("ball radius must be non-negative")


def prox_nonneg(x) -> np.ndarray:
    """Projection onto the non-negative orthant."""
    return np.maximum(x, 0.0)


def prox_l2ball_conj(v, sigma: float, ball: L2BallData | float) -> np.ndarray:
    """Shrink ``v`` toward zero by ``sigma * radius`` in Euclidean norm.

    This is the prox of ``sigma * radius * ||.||_2``, which together with the
    caller subtracting ``sigma * center`` is the prox of the conjugate of the
    ball indicator.  ``norm(0)`` is taken as 0.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    radius = ball.radius if isinstance(ball, L2BallData) else float(ball)
    v = np.asarray(v, dtype=np.float64)
    if radius == 0.0:
        return v.copy()
    nv = np.linalg.norm(v)
    mag = max(nv - sigma * radius, 0.0)
    if mag == 0.0:
        return np.zeros_like(v)
    return (mag / nv) * v


def prox_linf_clip(v, bound: float) -> np.ndarray:
    """Componentwise clamp to ``[-bound, bound]``.

    Equal to ``bound * v / max(bound, |v|)``; the clamp form leaves interior
    points bit-identical, so the map is exactly idempotent.
    """
    if bound < 0:
        raise ValueError("bound must be non-negative")
    v = np.asarray(v, dtype=np.float64)
    if bound == 0.0:
        return np.zeros_like(v)
    return np.clip(v, -bound, bound)


# Functions whose prox the maps above compute, for the variational check.

def nonneg_indicator(q) -> float:
    return 0.0 if np.all(np.asarray(q) >= 0) else np.inf


def linf_ball_indicator(bound: float) -> Callable:
    def f(q):
        return 0.0 if np.max(np.abs(q), initial=0.0) <= bound * (1 + 1e-12) else np.inf
    return f


def scaled_l2_norm(weight: float) -> Callable:
    def f(q):
        return weight * float(np.linalg.norm(q))
    return f


@dataclass
class ResolventReport:
    n_checked: int = 0
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def resolvent_identity_check(prox_fn: Callable, points: Sequence, penalty: Callable,
                             test_points: Sequence | None = None,
                             rtol: float = 1e-10) -> ResolventReport:
    """Check ``p = prox(v)`` against the subgradient inequality.

    For every ``v`` in ``points`` and every ``q`` in ``test_points``::

        penalty(q) >= penalty(p) + <v - p, q - p>

    For indicator penalties and ``q`` inside the set this is the projection
    inequality ``<v - p, q - p> <= 0``.  Test points outside the domain of
    ``penalty`` are skipped.  By default the images of all points serve as
    test points.
    """
    proxed = [prox_fn(np.asarray(v, dtype=float)) for v in points]
    if test_points is None:
        test_points = proxed
    report = ResolventReport()
    for v, p in zip(points, proxed):
        fp = penalty(p)
        for q in test_points:
            fq = penalty(q)
            if not np.isfinite(fq):
                continue
            lhs = fq
            rhs = fp + float(np.dot(np.asarray(v) - p, np.asarray(q) - p))
            tol = rtol * (1.0 + abs(lhs) + abs(rhs)
                          + np.linalg.norm(np.asarray(v) - p) * np.linalg.norm(np.asarray(q) - p))
            report.n_checked += 1
            if lhs < rhs - tol:
                report.violations.append((np.asarray(v), np.asarray(q), rhs - lhs))
    return report
