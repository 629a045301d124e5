import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stackpdhg.geometry import default_geometry
from stackpdhg.linop import MatrixOperator, identity, op_norm, stack
from stackpdhg.pdhg import (ConvergenceLog, DataBallTerm, DivergenceError, IterateState, L1Term,
                            ProblemSpec, StepConfig, StepParams, check_scale_invariance,
                            derive_step_params, pdhg_iterate, solve, step_condition_residual)
from stackpdhg.phantom import builtin_phantoms, phantom_grid, rasterize
from stackpdhg.problems import DTVConfig, build_dtv_2d
from stackpdhg.tomo_ops import make_projector


def test_step_config_ranges():
    for bad in [dict(beta=0), dict(beta=1, gamma=0.5), dict(beta=1, rho=2.0), dict(beta=1, rho=0.9)]:
        with pytest.raises(ValueError):
            StepConfig(**bad)


def test_single_block_example():
    K = stack([identity(6)], [1.0])
    s = derive_step_params(K, StepConfig(4.0, 1.0))
    assert s.w == pytest.approx(1.0, rel=1e-12)
    assert s.tau == pytest.approx(0.5, rel=1e-12)
    assert s.sigma[0] == pytest.approx(2.0, rel=1e-12)
    assert s.nu[0] == 1.0
    assert s.sigma[0] * s.tau == pytest.approx(1.0, rel=1e-12)


def test_two_identity_blocks():
    K = stack([identity(5), identity(5)], [1.0, 1.0])
    s = derive_step_params(K, StepConfig(1.0, 1.0))
    assert s.w == pytest.approx(0.5, rel=1e-12)
    assert s.tau == pytest.approx(1 / np.sqrt(2), rel=1e-12)
    assert np.allclose(s.sigma, 1 / np.sqrt(2), rtol=1e-12)
    assert np.allclose(s.nu, 1.0, rtol=1e-12)

    s = derive_step_params(K, StepConfig(2.0, 3.0))
    tau = np.sqrt(3 / 8)
    assert s.w == pytest.approx(0.25, rel=1e-12)
    assert s.tau == pytest.approx(tau, rel=1e-12)
    assert np.allclose(s.sigma, 2 * tau, rtol=1e-12)
    assert s.nu[0] == 1.0 and s.nu[1] == pytest.approx(np.sqrt(1 / 8) / tau, rel=1e-12)
    # step condition evaluated directly: tau * (sigma1 nu1^2 + sigma2 nu2^2)
    assert abs(s.tau * np.sum(s.sigma * s.nu ** 2) - 1) <= 1e-10


@settings(max_examples=25, deadline=None)
@given(n_blocks=st.integers(1, 6), seed=st.integers(0, 10**6), beta=st.floats(0.01, 1000),
       gamma=st.floats(1, 10))
def test_step_invariants(n_blocks, seed, beta, gamma):
    rng = np.random.default_rng(seed)
    blocks = [MatrixOperator(rng.standard_normal((int(rng.integers(1, 6)), 4)) * rng.uniform(0.1, 10))
              for _ in range(n_blocks)]
    K = stack(blocks, [op_norm(b, tol=1e-12) for b in blocks])
    s = derive_step_params(K, StepConfig(beta, gamma), norm_tol=1e-10)
    assert s.nu[0] == 1.0
    assert np.allclose(s.sigma, beta * s.tau, rtol=1e-14)
    assert np.allclose(s.weights[1:], s.w * s.w_hat[1:], rtol=1e-12)
    assert s.weights[0] == pytest.approx(s.w * s.w_hat[0], rel=1e-12)
    assert abs(step_condition_residual(K, s, norm_tol=1e-10)) <= 1e-8


def _least_squares_problem():
    rng = np.random.default_rng(7)
    A = rng.standard_normal((8, 4))
    f0 = np.array([1.0, 0.5, 0.0, 2.0])
    L = np.linalg.norm(A, 2)
    K = stack([MatrixOperator(A)], [L])
    g = A @ f0
    return ProblemSpec(K, [DataBallTerm(g / L, 0.0, L, 8)]), A, g, f0


def _projected_gradient(A, g, tol=1e-10):
    x = np.zeros(A.shape[1])
    step = 1.0 / np.linalg.norm(A, 2) ** 2
    for _ in range(10**6):
        new = np.maximum(x - step * A.T @ (A @ x - g), 0)
        if np.max(np.abs(new - x)) < tol:
            return new
        x = new
    return x


def test_tiny_problem_matches_projected_gradient():
    problem, A, g, _ = _least_squares_problem()
    oracle = _projected_gradient(A, g)
    state, _ = solve(problem, StepConfig(1.0, 1.0, 1.5), 20000, log_every=1000)
    assert np.max(np.abs(state.x - oracle)) <= 1e-6


def test_zero_data_stays_zero():
    grid, geom, _, _ = _study(16, n_views=5)
    p = build_dtv_2d(geom, grid, np.zeros(geom.size), DTVConfig({"x": 0.5, "l1": 0.5}, 0.0))
    steps = derive_step_params(p.K, StepConfig(10.0))
    state = IterateState.zeros(p)
    for _ in range(20):
        state = pdhg_iterate(p, steps, 1.75, state)
        assert not np.any(state.x) and not any(np.any(l) for l in state.lam)


def test_rho_one_is_plain_update():
    problem, *_ = _least_squares_problem()
    steps = derive_step_params(problem.K, StepConfig(2.0))
    s0 = IterateState(np.array([0.3, 0.0, 1.0, 0.2]), [np.ones(8) * 0.1], 0)
    a = pdhg_iterate(problem, steps, 1.0, s0)
    # rebuild x_hat and lambda_hat by hand
    K = problem.K.with_scalings(steps.nu)
    x_hat = np.maximum(s0.x - steps.tau * K.adjoint_blocks(s0.lam), 0)
    kx = K.apply_blocks(2 * x_hat - s0.x)[0]
    term = problem.dual_terms[0]
    lam_hat = term.prox(s0.lam[0] + steps.sigma[0] * kx, steps.sigma[0], 1.0)
    assert np.array_equal(a.x, x_hat) and np.array_equal(a.lam[0], lam_hat)


def test_single_block_matches_scalar_pdhg_bitwise():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((10, 6))
    L = np.linalg.norm(A, 2)
    g = rng.standard_normal(10)
    problem = ProblemSpec(stack([MatrixOperator(A)], [L]), [DataBallTerm(g / L, 0.2, L, 10)])
    steps = derive_step_params(problem.K, StepConfig(3.0))
    tau, sigma = steps.tau, steps.sigma[0]
    # plain scalar algorithm with the normalized matrix and the same steps
    Ah = MatrixOperator(A)
    x, lam = np.zeros(6), np.zeros(10)
    state = IterateState.zeros(problem)
    for _ in range(30):
        x_new = np.maximum(x - tau * ((1.0 / L) * Ah.adjoint(lam)), 0.0)
        xt = 2.0 * x_new - x
        v = lam + sigma * ((1.0 / L) * Ah.apply(xt))
        lam = DataBallTerm(g / L, 0.2).prox(v, sigma, 1.0)
        x = x_new
        state = pdhg_iterate(problem, steps, 1.0, state)
        assert np.array_equal(state.x, x) and np.array_equal(state.lam[0], lam)


def _study(n, n_views=25, seed=0):
    ph = builtin_phantoms()["breast2d"]
    grid = phantom_grid(ph, (n, n))
    geom = default_geometry(grid, n_views=n_views)
    truth = rasterize(ph, grid)
    g = make_projector(grid, geom).apply(truth.values)
    return grid, geom, g, truth


def test_nonneg_every_iteration_and_reproducible():
    grid, geom, g, truth = _study(32)
    p = build_dtv_2d(geom, grid, g, DTVConfig({"x": .25, "a": .25, "b": .25, "l1": .25}, 0.0))
    seen = []
    solve(p, StepConfig(10.0, 2.0, 1.0), 60, callback=lambda s: seen.append(float(s.x.min())))
    assert min(seen) >= 0.0
    # with rho > 1 the relaxed point may leave the orthant; the resolvent
    # point x_hat = x + (x_new - x) / rho never does
    steps = derive_step_params(p.K, StepConfig(10.0, 2.0, 1.75))
    st = IterateState.zeros(p)
    for _ in range(30):
        new = pdhg_iterate(p, steps, 1.75, st)
        x_hat = st.x + (new.x - st.x) / 1.75
        assert x_hat.min() >= -1e-12 * max(1.0, np.abs(st.x).max())
        st = new
    state, log = solve(p, StepConfig(10.0, 2.0, 1.75), 60, truth=truth)
    state2, log2 = solve(p, StepConfig(10.0, 2.0, 1.75), 60, truth=truth)
    assert np.array_equal(state.x, state2.x)
    assert log.data_rmse == log2.data_rmse and log.image_rmse == log2.image_rmse
    assert log.iters == list(range(10, 61, 10))


def test_data_rmse_converges_on_consistent_data():
    grid, geom, g, truth = _study(32)
    p = build_dtv_2d(geom, grid, g, DTVConfig({"x": .25, "a": .25, "b": .25, "l1": .25}, 0.0))
    _, log = solve(p, StepConfig(100.0, 1.0, 1.75), 2000, log_every=100)
    # limited-angle convergence is slow and sublinear at this scale
    assert log.data_rmse[-1] < 0.2 * log.data_rmse[0]
    # trend: each quarter of the run ends lower than the previous one
    q = [log.data_rmse[i] for i in (4, 9, 14, 19)]
    assert all(b < a for a, b in zip(q, q[1:]))


def _full_rank_study():
    # 180 degree arc with more bins than columns: X has full column rank, so
    # the only feasible point of the equality constraint is the truth
    ph = builtin_phantoms()["breast2d"]
    grid = phantom_grid(ph, (16, 16))
    truth = rasterize(ph, grid, supersample=4)
    geom = default_geometry(grid, n_views=25, arc_half_angle=90.0, n_bins=33)
    g = make_projector(grid, geom).apply(truth.values)
    return build_dtv_2d(geom, grid, g, DTVConfig({"x": 1.0}, 0.0, c=1.0)), truth.values.ravel()


def test_solution_independent_of_beta():
    p, truth = _full_rank_study()
    for beta in (300.0, 3000.0):
        state, _ = solve(p, StepConfig(beta, 1.0, 1.75), 12000, log_every=4000)
        assert np.linalg.norm(state.x - truth) <= 1e-3 * np.linalg.norm(truth)


def test_data_target_stops_early():
    grid, geom, g, _ = _study(16, n_views=9)
    p = build_dtv_2d(geom, grid, g, DTVConfig({"x": .5, "l1": .5}, 0.0))
    _, log = solve(p, StepConfig(10.0), 5000, data_target=1e-2)
    assert log.iters[-1] < 5000 and log.data_rmse[-1] <= 1e-2


def test_divergence_names_block():
    problem, *_ = _least_squares_problem()
    problem.dual_terms[0].center[:] = np.nan
    with pytest.raises(DivergenceError, match="data|block0") as err:
        solve(problem, StepConfig(1.0), 10, log_every=1)
    assert err.value.log is not None


def test_n_iter_rejected():
    problem, *_ = _least_squares_problem()
    with pytest.raises(ValueError):
        solve(problem, StepConfig(1.0), 0)


def test_scale_invariance_exact_mode():
    grid, geom, g, _ = _study(8, n_views=5)
    p = build_dtv_2d(geom, grid, g, DTVConfig({"x": .25, "a": .25, "b": .25, "l1": .25}, 1e-3))
    steps = derive_step_params(p.K, StepConfig(10.0, 2.0))
    assert check_scale_invariance(p, steps, 1.0, 50) == 0.0
    for k in (4.0, 0.25, 3.0):
        assert check_scale_invariance(p, steps, k, 50, mode="exact") <= 1e-8
        assert check_scale_invariance(p, steps, k, 50, rho=1.75, mode="exact") <= 1e-8
    with pytest.raises(ValueError):
        check_scale_invariance(p, steps, -1.0, 5)


def test_log_csv_round_trip(tmp_path):
    log = ConvergenceLog()
    rng = np.random.default_rng(0)
    for k in range(1, 6):
        log.record(k * 10, rng.random() * 1e-3, rng.random(), rng.random())
    log.to_csv(tmp_path / "a.csv")
    back = ConvergenceLog.from_csv(tmp_path / "a.csv")
    assert back.iters == log.iters and back.data_rmse == log.data_rmse
    assert back.image_rmse == log.image_rmse and back.elapsed == log.elapsed
    log.to_csv(tmp_path / "b.csv", timing=False)
    assert all(np.isnan(ConvergenceLog.from_csv(tmp_path / "b.csv").elapsed))
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "iter,data_rmse,image_rmse,elapsed_seconds"
