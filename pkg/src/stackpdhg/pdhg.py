"""Stacked primal-dual hybrid gradient solver.

Solves ``min_x sum_i F_i(K_i x) + G(x)`` with ``G`` the non-negativity
indicator (or zero).  The blocks enter normalized, ``K_hat_i = K_i / L_i``,
and scaled by ``nu_i``; the per-block dual steps ``sigma_i``, the primal step
``tau`` and the ``nu_i`` all follow from two numbers:

* ``beta``  -- common ratio ``sigma_i / tau`` of every block,
* ``gamma`` -- relative step weight of the first (data) block,

plus the relaxation ``rho`` of the predictor-corrector update
``x <- x + rho (x_hat - x)`` applied to primal and dual variables.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .linop import BlockOperator, LinearOperator, op_norm
from .prox import prox_l2ball_conj, prox_linf_clip

__all__ = [
    "StepConfig",
    "StepParams",
    "DataBallTerm",
    "L1Term",
    "ProblemSpec",
    "IterateState",
    "ConvergenceLog",
    "DivergenceError",
    "derive_step_params",
    "step_condition_residual",
    "pdhg_iterate",
    "solve",
    "check_scale_invariance",
]


@dataclass(frozen=True)
class StepConfig:
    beta: float
    gamma: float = 1.0
    rho: float = 1.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.gamma >= 1:
            raise ValueError("gamma must be >= 1")
        if not 1 <= self.rho < 2:
            raise ValueError("rho must lie in [1, 2)")


@dataclass(frozen=True)
class StepParams:
    w: float
    w_hat: np.ndarray
    r: np.ndarray
    tau: float
    sigma: np.ndarray
    nu: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        """Per-block step weights ``tau * sigma_i * nu_i**2``."""
        return self.tau * self.sigma * self.nu ** 2

    def rescaled(self, nu_factor: float, tau_factor: float, sigma_factor: float) -> "StepParams":
        return StepParams(self.w, self.w_hat, self.r * sigma_factor / tau_factor,
                          self.tau * tau_factor, self.sigma * sigma_factor, self.nu * nu_factor)


class DataBallTerm:
    """Data constraint ``||K_hat x - center||_2 <= radius`` on a normalized block.

    ``scale`` (the block norm) and ``n_data`` turn the residual back into
    the filtered-data RMSE that ``radius`` was derived from.
    """

    kind = "l2ball"

    def __init__(self, center, radius: float, scale: float = 1.0, n_data: int | None = None):
        if radius < 0:
            raise ValueError("radius must be non-negative")
        self.center = np.asarray(center, dtype=np.float64).reshape(-1)
        self.radius = float(radius)
        self.scale = float(scale)
        self.n_data = int(self.center.size if n_data is None else n_data)

    def prox(self, v, sigma, nu):
        return prox_l2ball_conj(v - (sigma * nu) * self.center, sigma, nu * self.radius)

    def rmse(self, khat_x) -> float:
        return self.scale * float(np.linalg.norm(khat_x - self.center)) / np.sqrt(self.n_data)

    def value(self, khat_x) -> float:
        return 0.0 if np.linalg.norm(khat_x - self.center) <= self.radius * (1 + 1e-9) else np.inf


class L1Term:
    """Penalty ``alpha * ||K_i x||_1 = alpha * L_i * ||K_hat_i x||_1``.

    Its conjugate, seen through the block scaling ``nu``, is the indicator of
    the l-infinity ball of radius ``alpha * L_i / nu``.
    """

    kind = "l1"

    def __init__(self, alpha: float, norm: float = 1.0):
        if alpha < 0:
            raise ValueError("alpha must be non-negative")
        self.alpha = float(alpha)
        self.norm = float(norm)

    def bound(self, nu: float) -> float:
        return self.alpha * self.norm / nu

    def prox(self, v, sigma, nu):
        return prox_linf_clip(v, self.bound(nu))

    def value(self, khat_x) -> float:
        return self.alpha * self.norm * float(np.abs(khat_x).sum())


@dataclass
class ProblemSpec:
    """Blocks with cached norms (unit scalings), one dual term per block."""

    K: BlockOperator
    dual_terms: list
    nonneg: bool = True
    names: list = None

    def __post_init__(self):
        if len(self.dual_terms) != len(self.K):
            raise ValueError("one dual term per block required")
        if self.names is None:
            self.names = [f"block{i}" for i in range(len(self.K))]
        if not np.all(self.K.scalings == 1.0):
            self.K = self.K.with_scalings(np.ones(len(self.K)))

    @property
    def data_term(self) -> DataBallTerm | None:
        t = self.dual_terms[0]
        return t if isinstance(t, DataBallTerm) else None

    def khat(self, i: int, x) -> np.ndarray:
        return self.K.blocks[i].apply(x) / self.K.norms[i]

    def objective(self, x) -> float:
        """Sum of the block terms at ``x`` (inf when a constraint is violated)."""
        total = 0.0
        for i, term in enumerate(self.dual_terms):
            total += term.value(self.khat(i, x))
        if self.nonneg and np.any(x < 0):
            return np.inf
        return total

    def penalty(self, x) -> float:
        """Sum of the l1 terms only."""
        return sum(t.value(self.khat(i, x)) for i, t in enumerate(self.dual_terms)
                   if isinstance(t, L1Term))


@dataclass
class IterateState:
    x: np.ndarray
    lam: list
    k: int = 0

    @classmethod
    def zeros(cls, problem: ProblemSpec) -> "IterateState":
        K = problem.K
        return cls(np.zeros(K.domain_len), [np.zeros(b.codomain_len) for b in K.blocks], 0)


class DivergenceError(FloatingPointError):
    def __init__(self, message, state=None, log=None):
        super().__init__(message)
        self.state = state
        self.log = log


@dataclass
class ConvergenceLog:
    iters: list = field(default_factory=list)
    data_rmse: list = field(default_factory=list)
    image_rmse: list = field(default_factory=list)
    elapsed: list = field(default_factory=list)

    columns = ("iter", "data_rmse", "image_rmse", "elapsed_seconds")

    def record(self, k, data, image, elapsed):
        self.iters.append(int(k))
        self.data_rmse.append(float(data))
        self.image_rmse.append(float(image))
        self.elapsed.append(float(elapsed))

    def __len__(self):
        return len(self.iters)

    def to_csv(self, path, timing: bool = True):
        """Write the log; without ``timing`` the elapsed column holds ``nan``
        so that reruns produce identical bytes."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for k, d, im, t in zip(self.iters, self.data_rmse, self.image_rmse, self.elapsed):
                w.writerow([k, f"{d:.17g}", f"{im:.17g}", f"{t:.17g}" if timing else "nan"])

    @classmethod
    def from_csv(cls, path) -> "ConvergenceLog":
        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                log.record(int(row["iter"]), float(row["data_rmse"]), float(row["image_rmse"]),
                           float(row["elapsed_seconds"]))
        return log


def derive_step_params(K: BlockOperator, config: StepConfig, norm_tol: float = 1e-6,
                       seed: int = 0, max_iter: int = 5000) -> StepParams:
    """Step parameters from ``(beta, gamma)``.

    ``w_hat = (gamma, 1, ..., 1)``, ``r_i = beta``, then::

        w       = 1 / || sum_i w_hat_i K_hat_i^T K_hat_i ||
        tau     = sqrt(w w_hat_1 / r_1)
        sigma_i = r_i tau
        nu_i    = sqrt(w w_hat_i / r_i) / tau      (nu_1 = 1)
    """
    n = len(K)
    w_hat = np.ones(n)
    w_hat[0] = config.gamma
    r = np.full(n, float(config.beta))
    # ||sum w_hat_i K_hat_i^T K_hat_i|| = ||stack(sqrt(w_hat_i) K_hat_i)||^2
    gram_root = K.with_scalings(np.sqrt(w_hat))
    w = 1.0 / op_norm(gram_root, tol=norm_tol, max_iter=max_iter, seed=seed) ** 2
    tau = float(np.sqrt(w * w_hat[0] / r[0]))
    sigma = r * tau
    nu = np.sqrt(w * w_hat / r) / tau
    nu[0] = 1.0
    return StepParams(w, w_hat, r, tau, sigma, nu)


def step_condition_residual(K: BlockOperator, steps: StepParams, norm_tol: float = 1e-6,
                            seed: int = 1, max_iter: int = 5000) -> float:
    """``tau * || sum_i sigma_i nu_i^2 K_hat_i^T K_hat_i || - 1``."""
    root = K.with_scalings(np.sqrt(steps.sigma) * steps.nu)
    return steps.tau * op_norm(root, tol=norm_tol, max_iter=max_iter, seed=seed) ** 2 - 1.0


def pdhg_iterate(problem: ProblemSpec, steps: StepParams, rho: float, state: IterateState,
                 K: BlockOperator | None = None) -> IterateState:
    """One relaxed PDHG update.  ``K`` may pass the block operator already
    scaled by ``steps.nu`` to avoid rebuilding it every iteration."""
    if K is None:
        K = problem.K.with_scalings(steps.nu)
    x = state.x
    x_hat = x - steps.tau * K.adjoint_blocks(state.lam)
    if problem.nonneg:
        x_hat = np.maximum(x_hat, 0.0)
    x_tilde = 2.0 * x_hat - x
    kx = K.apply_blocks(x_tilde)
    lam_hat = [
        term.prox(lam + s * y, s, nu)
        for term, lam, y, s, nu in zip(problem.dual_terms, state.lam, kx, steps.sigma, steps.nu)
    ]
    if rho == 1.0:
        x_new, lam_new = x_hat, lam_hat
    else:
        x_new = x + rho * (x_hat - x)
        lam_new = [lam + rho * (lh - lam) for lam, lh in zip(state.lam, lam_hat)]
    new = IterateState(x_new, lam_new, state.k + 1)
    if not np.all(np.isfinite(x_new)):
        raise DivergenceError(f"non-finite primal iterate at iteration {new.k}", new)
    for name, lam in zip(problem.names, lam_new):
        if not np.all(np.isfinite(lam)):
            raise DivergenceError(f"non-finite dual iterate in block {name!r} at iteration {new.k}", new)
    return new


def solve(problem: ProblemSpec, config: StepConfig, n_iter: int, truth=None,
          log_every: int = 10, data_target: float | None = None,
          steps: StepParams | None = None, norm_tol: float = 1e-6,
          image_op: LinearOperator | None = None,
          callback: Callable[[IterateState], None] | None = None):
    """Run ``n_iter`` iterations from zero.

    Every ``log_every`` iterations (and at the last one) the filtered-data
    RMSE and, given ``truth``, the per-voxel image RMSE are recorded.  The
    image RMSE is taken on ``image_op(x)`` when ``image_op`` is given, on the
    latent ``x`` otherwise.  With ``data_target`` the loop stops at the first
    logged iteration whose data RMSE is at or below the target.

    Returns ``(state, log)``.  On divergence a :class:`DivergenceError` is
    raised carrying the partial log.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    if steps is None:
        steps = derive_step_params(problem.K, config, norm_tol=norm_tol)
    K = problem.K.with_scalings(steps.nu)
    truth_v = None if truth is None else np.asarray(getattr(truth, "values", truth), dtype=float).reshape(-1)
    data = problem.data_term
    state = IterateState.zeros(problem)
    log = ConvergenceLog()
    t0 = time.perf_counter()
    for k in range(1, n_iter + 1):
        try:
            state = pdhg_iterate(problem, steps, config.rho, state, K)
        except DivergenceError as err:
            err.log = log
            raise
        if callback is not None:
            callback(state)
        if k % log_every == 0 or k == n_iter:
            d = data.rmse(problem.khat(0, state.x)) if data is not None else np.nan
            im = np.nan
            if truth_v is not None:
                img = state.x if image_op is None else image_op.apply(state.x)
                im = float(np.sqrt(np.mean((img - truth_v) ** 2)))
            log.record(k, d, im, time.perf_counter() - t0)
            if data_target is not None and d <= data_target:
                break
    return state, log


def check_scale_invariance(problem: ProblemSpec, steps: StepParams, k_scale: float, n_iter: int,
                           rho: float = 1.0, mode: str = "sqrt") -> float:
    """Largest primal deviation between a baseline run and a rescaled one.

    ``mode="sqrt"`` scales ``(nu, sigma, tau)`` by ``(k, 1/sqrt(k), 1/sqrt(k))``.
    ``mode="exact"`` scales them by ``(k, 1/k**2, 1)``, the change that maps
    the iteration onto itself with duals divided by ``k``.
    """
    if k_scale <= 0:
        raise ValueError("k_scale must be positive")
    if mode == "sqrt":
        other = steps.rescaled(k_scale, 1 / np.sqrt(k_scale), 1 / np.sqrt(k_scale))
    elif mode == "exact":
        other = steps.rescaled(k_scale, 1.0, 1 / k_scale ** 2)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    a = IterateState.zeros(problem)
    b = IterateState.zeros(problem)
    Ka = problem.K.with_scalings(steps.nu)
    Kb = problem.K.with_scalings(other.nu)
    dev = 0.0
    for _ in range(n_iter):
        a = pdhg_iterate(problem, steps, rho, a, Ka)
        b = pdhg_iterate(problem, other, rho, b, Kb)
        dev = max(dev, float(np.max(np.abs(a.x - b.x))))
    return dev
