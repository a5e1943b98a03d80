import numpy as np
import pytest
from pydantic import ValidationError
from scipy import optimize

from lobstefan.estimation import (EstimationConfig, LikelihoodMoments, Stage1Fit, Stage2Fit, fit_initial_profile,
                                  fit_stage1_degenerate, fit_stage1_fixed_degree, fit_stage2, initial_rho,
                                  mse_book, mse_boundary, neg2_loglik, residual_field, select_stage1_aic)
from lobstefan.exceptions import InvalidParameterError, ShapeMismatchError, SingularMatrixError
from lobstefan.model import SIGMA_EXPONENT, GridSpec, InitialConditionSpec, OrderBookDataset, eval_u0
from lobstefan.simulator import SimulationConfig, simulate, solve_deterministic

from conftest import make_params

UNIT_GRID = GridSpec(dt=1.0, dx=1.0, n_time=2, n_price=3)


def _unit_grid(D):
    return GridSpec(dt=1.0, dx=1.0, n_time=D.shape[0], n_price=D.shape[1])


def test_residuals_of_constant_book_vanish():
    D = np.full((5, 6), 3.0)
    np.testing.assert_array_equal(residual_field(D, 0.7, _unit_grid(D)), np.zeros((4, 4)))


def test_residuals_of_time_ramp():
    D = np.repeat(np.arange(5.0)[:, None], 6, axis=1)
    np.testing.assert_array_equal(residual_field(D, 0.3, _unit_grid(D)), np.ones((4, 4)))


def test_residuals_of_scheme_output_vanish(small_grid):
    result = solve_deterministic(make_params(), small_grid)
    R = residual_field(result.dataset.ask, 0.5, small_grid)
    assert np.max(np.abs(R)) <= 1e-15


def test_residuals_need_a_matrix():
    with pytest.raises(ShapeMismatchError):
        residual_field(np.ones((1, 5)), 0.5, UNIT_GRID)
    with pytest.raises(ShapeMismatchError):
        residual_field(np.ones((4, 2)), 0.5, UNIT_GRID)


def test_single_cell_likelihood():
    D = np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    assert neg2_loglik(D, 0.25, (0.0, 1.0), UNIT_GRID) == pytest.approx(4.0)
    assert neg2_loglik(np.zeros((2, 3)), 0.25, (0.0, 1.0), UNIT_GRID) == 0.0


def test_likelihood_weights_first_residual_at_one_step():
    # the only residual column is centred on the cell at 2*dx but weighted at x = dx
    grid = GridSpec(dt=0.1, dx=0.5, n_time=2, n_price=3)
    D = np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    expected = ((1 + 0.5 ** 2) / 0.5 ** SIGMA_EXPONENT) ** 2
    assert neg2_loglik(D, 0.25, (0.0, 1.0), grid) == pytest.approx(expected, rel=1e-12)


def test_likelihood_is_quadratic_in_scale():
    grid = GridSpec(dt=0.004, dx=0.1, n_time=10, n_price=8)
    D = np.random.default_rng(1).uniform(0, 1, (10, 8))
    base = neg2_loglik(D, 0.4, (0.1, 0.5), grid)
    assert neg2_loglik(3.0 * D, 0.4, (0.1, 0.5), grid) == pytest.approx(9.0 * base, rel=1e-12)


def test_likelihood_needs_degree_one():
    with pytest.raises(InvalidParameterError):
        neg2_loglik(np.ones((3, 4)), 0.5, (1.0,), UNIT_GRID)


def test_moments_match_direct_likelihood():
    grid = GridSpec(dt=0.004, dx=0.1, n_time=30, n_price=12)
    D = np.random.default_rng(2).uniform(0, 1, (30, 12))
    moments = LikelihoodMoments.from_matrix(D, grid)
    for alpha, p in [(0.2, (0.0, 1.0)), (0.9, (0.3, -0.1, 0.05))]:
        assert moments.value(alpha, p) == pytest.approx(neg2_loglik(D, alpha, p, grid), rel=1e-9)


def test_moment_gradient_matches_finite_differences():
    grid = GridSpec(dt=0.004, dx=0.1, n_time=30, n_price=12)
    D = np.random.default_rng(3).uniform(0, 1, (30, 12))
    moments = LikelihoodMoments.from_matrix(D, grid)
    theta = np.array([0.6, 0.2, -0.1, 0.3])
    numeric = optimize.approx_fprime(theta, lambda th: moments.value(th[0], th[1:]), 1e-7)
    np.testing.assert_allclose(moments.gradient(theta[0], theta[1:]), numeric, rtol=1e-4)


def _weighted_residuals(D, alpha, d, grid):
    R = residual_field(D, alpha, grid)
    x = grid.dx * np.arange(1, R.shape[1] + 1)
    phi = x[:, None] ** np.arange(1, d + 2)[None, :]
    scale = x ** SIGMA_EXPONENT

    def fun(p):
        return (R * ((1.0 + phi @ p) / scale)[None, :]).ravel()

    def jac(p):
        return (R[:, :, None] * (phi / scale[:, None])[None, :, :]).reshape(-1, d + 1)

    return fun, jac


@pytest.mark.parametrize("d", [1, 2, 3])
def test_degenerate_fit_matches_generic_minimizer(d):
    rng = np.random.default_rng(100 + d)
    grid = GridSpec(dt=0.004, dx=0.1, n_time=50, n_price=20)
    for _ in range(50):
        D = rng.uniform(0.0, 1.0, (50, 20))
        alpha0 = rng.uniform(0.1, 1.0)
        p_hat = fit_stage1_degenerate(D, alpha0, d, grid)
        fun, jac = _weighted_residuals(D, alpha0, d, grid)
        ref = optimize.least_squares(fun, np.zeros(d + 1), jac=jac, method='lm', xtol=1e-15, ftol=1e-15, gtol=1e-15)
        assert np.linalg.norm(p_hat - ref.x) <= 1e-6 * np.linalg.norm(ref.x)
        # first-order condition of the normal equations
        grad = 2.0 * jac(p_hat).T @ fun(p_hat)
        grad0 = 2.0 * jac(np.zeros(d + 1)).T @ fun(np.zeros(d + 1))
        assert np.linalg.norm(grad) <= 1e-8 * np.linalg.norm(grad0) * (1.0 + np.linalg.norm(p_hat))


def test_degenerate_fit_single_cell():
    D = np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    p = fit_stage1_degenerate(D, 0.25, 1, UNIT_GRID)
    np.testing.assert_allclose(p, [-0.5, -0.5], rtol=1e-12)
    assert neg2_loglik(D, 0.25, p, UNIT_GRID) <= 1e-28


def test_degenerate_fit_without_residuals_is_singular():
    with pytest.raises(SingularMatrixError):
        fit_stage1_degenerate(np.full((4, 5), 2.0), 0.5, 1, _unit_grid(np.ones((4, 5))))


def test_noiseless_stage1_recovers_alpha():
    grid = GridSpec(dt=0.008, dx=0.1, n_time=60, n_price=30)
    D = solve_deterministic(make_params(alpha=0.5), grid).dataset.ask
    fit = select_stage1_aic(D, grid, EstimationConfig(degree_range_stage1=(1, 2), restarts=2))
    assert fit.alpha_hat == pytest.approx(0.5, abs=1e-6)
    assert all(row.neg2ll <= 1e-12 for row in fit.per_degree_table)


@pytest.fixture(scope='module')
def noisy_book():
    grid = GridSpec(dt=0.008, dx=0.1, n_time=80, n_price=30)
    params = make_params(alpha=0.5, q_ask=(20.0,), q_bid=(20.0,), rho=10.0)
    return simulate(params, SimulationConfig(grid=grid, seed=3)).dataset


def test_fixed_degree_beats_random_probes(noisy_book):
    grid = noisy_book.grid
    fit = fit_stage1_fixed_degree(noisy_book.ask, 1, grid)
    rng = np.random.default_rng(0)
    for _ in range(100):
        alpha = rng.uniform(0.01, 2.0)
        p = rng.normal(0.0, 2.0, 2)
        assert neg2_loglik(noisy_book.ask, alpha, p, grid) >= fit.neg2ll * (1 - 1e-9)


def test_aic_table_is_definitional(noisy_book):
    fit = select_stage1_aic(noisy_book.bid, noisy_book.grid, EstimationConfig(degree_range_stage1=(1, 3)), 'bid')
    assert [row.degree for row in fit.per_degree_table] == [1, 2, 3]
    for row in fit.per_degree_table:
        assert row.aic == 2 * row.degree + row.neg2ll
    best = min(fit.per_degree_table, key=lambda row: (row.aic, row.degree))
    assert (fit.degree_hat, fit.aic, fit.alpha_hat) == (best.degree, best.aic, best.alpha)
    assert fit.side == 'bid'


def test_single_degree_range(noisy_book):
    fit = select_stage1_aic(noisy_book.ask, noisy_book.grid, EstimationConfig(degree_range_stage1=(2, 2)))
    assert fit.degree_hat == 2
    assert len(fit.p_hat) == 3


def test_fixed_degree_rejects_zero(noisy_book):
    with pytest.raises(InvalidParameterError):
        fit_stage1_fixed_degree(noisy_book.ask, 0, noisy_book.grid)


@pytest.mark.parametrize("field,value", [
    ('degree_range_stage1', (0, 3)),
    ('degree_range_stage1', (3, 1)),
    ('degree_range_stage2', (-1, 2)),
    ('theta0', -0.5),
])
def test_estimation_config_validation(field, value):
    with pytest.raises(ValidationError):
        EstimationConfig(**{field: value})


def test_stage1_fit_checks_aic_minimum(noisy_book):
    fit = select_stage1_aic(noisy_book.ask, noisy_book.grid, EstimationConfig(degree_range_stage1=(1, 2)))
    data = fit.model_dump()
    data['aic'] = fit.aic + 1.0
    with pytest.raises(ValidationError):
        Stage1Fit.model_validate(data)


def _book(ask, bid, mid, dt=0.1, dx=0.1):
    ask = np.asarray(ask, dtype=float)
    grid = GridSpec(dt=dt, dx=dx, n_time=ask.shape[0], n_price=ask.shape[1])
    return OrderBookDataset(ask=ask, bid=bid, mid=mid, grid=grid)


def test_book_error():
    rng = np.random.default_rng(4)
    ask, bid = rng.uniform(1, 2, (6, 5)), rng.uniform(1, 2, (6, 5))
    data = _book(ask, bid, np.zeros(6))
    assert mse_book(data, data) == 0.0
    shifted = _book(ask + 0.1, bid + 0.1, np.zeros(6))
    assert mse_book(data, shifted) == pytest.approx(0.01, rel=1e-9)
    far = _book(ask + 0.2, bid + 0.2, np.zeros(6))
    assert mse_book(data, far) == pytest.approx(4 * mse_book(data, shifted), rel=1e-9)
    with pytest.raises(ShapeMismatchError):
        mse_book(data, _book(ask[:5], bid[:5], np.zeros(5)))


@pytest.fixture(scope='module')
def stefan_data():
    grid = GridSpec(dt=0.008, dx=0.1, n_time=40, n_price=30)
    params = make_params(alpha=0.5, q_ask=(2.0,), q_bid=(1.0,), gamma=1.0, rho=2.0)
    return params, solve_deterministic(params, grid, initial_mid=0.2)


def test_boundary_error_of_generated_data(stefan_data):
    params, result = stefan_data
    assert mse_boundary(result.dataset, result, params.rho) <= 1e-10


def test_boundary_error_is_quadratic_in_rho(stefan_data):
    params, result = stefan_data
    delta = 0.3
    velocity = np.diff(result.dataset.mid) / result.dataset.grid.dt
    expected = delta ** 2 * np.mean(velocity ** 2)
    assert mse_boundary(result.dataset, result, params.rho + delta) == pytest.approx(expected, rel=1e-6)


def test_boundary_error_of_flat_symmetric_book():
    v = np.random.default_rng(5).uniform(0, 1, (4, 6))
    data = _book(v, v.copy(), np.full(4, 0.3))
    assert mse_boundary(data, data, 1.7) == 0.0
    assert initial_rho(data) is None


def test_initial_rho_of_generated_data(stefan_data):
    params, result = stefan_data
    assert initial_rho(result.dataset) == pytest.approx(params.rho, rel=1e-6)


def test_profile_fit_recovers_shape():
    grid = GridSpec(dt=0.01, dx=0.1, n_time=2, n_price=40)
    spec = InitialConditionSpec(coeffs=(1.5, 0.5), gamma=0.8)
    fit = fit_initial_profile(eval_u0(spec, grid.x_nodes), grid, 1)
    np.testing.assert_allclose(fit.coeffs, spec.coeffs, rtol=1e-5)
    assert fit.gamma == pytest.approx(0.8, rel=1e-5)


def _known_stage1(side, alpha=0.5):
    return Stage1Fit(side=side, alpha_hat=alpha, degree_hat=1, p_hat=(0.0, 1.0), aic=0.0, per_degree_table=[])


def test_stage2_on_generated_data(stefan_data):
    params, result = stefan_data
    data = result.dataset
    config = EstimationConfig(degree_range_stage2=(0, 0), theta0=1.0)
    fit = fit_stage2(data, _known_stage1('ask'), _known_stage1('bid'), config)
    truth = solve_deterministic(params, data.grid, initial_mid=float(data.mid[0]))
    true_objective = mse_book(data, truth) + mse_boundary(data, truth, params.rho)
    assert fit.rho_hat == pytest.approx(params.rho, rel=0.1)
    assert fit.objective <= true_objective + 1e-6
    assert fit.rho_identified
    assert (fit.degree_ask, fit.degree_bid) == (0, 0)
    assert fit.objective == fit.degree_ask + fit.degree_bid + fit.mse1 + fit.theta0 * fit.mse2


def test_stage2_ignores_mid_without_weight(stefan_data):
    _, result = stefan_data
    data = result.dataset
    moved = OrderBookDataset(ask=data.ask, bid=data.bid, mid=data.mid + 0.01 * np.arange(data.n_time),
                             grid=data.grid)
    config = EstimationConfig(degree_range_stage2=(0, 0), theta0=0.0)
    a = fit_stage2(data, _known_stage1('ask'), _known_stage1('bid'), config)
    b = fit_stage2(moved, _known_stage1('ask'), _known_stage1('bid'), config)
    assert a.q_ask_hat == b.q_ask_hat
    assert a.q_bid_hat == b.q_bid_hat
    assert not a.rho_identified and not b.rho_identified


def test_stage2_wider_range_never_worse(stefan_data):
    _, result = stefan_data
    data = result.dataset
    narrow = fit_stage2(data, _known_stage1('ask'), _known_stage1('bid'),
                        EstimationConfig(degree_range_stage2=(0, 0), stage2_max_evals=200))
    wide = fit_stage2(data, _known_stage1('ask'), _known_stage1('bid'),
                      EstimationConfig(degree_range_stage2=(0, 1), stage2_max_evals=200))
    assert wide.objective <= narrow.objective
    assert len(wide.candidates) == 4


def test_stage2_objective_must_add_up(stefan_data):
    _, result = stefan_data
    fit = fit_stage2(result.dataset, _known_stage1('ask'), _known_stage1('bid'),
                     EstimationConfig(degree_range_stage2=(0, 0), stage2_max_evals=50))
    data = fit.model_dump()
    data['objective'] = fit.objective + 1e-3
    with pytest.raises(ValidationError):
        Stage2Fit.model_validate(data)


@pytest.mark.slow
def test_stage1_recovery_over_seeds():
    grid = GridSpec(dt=0.008, dx=0.1, n_time=200, n_price=50)
    params = make_params(alpha=0.5, q_ask=(50.0,), q_bid=(50.0,), gamma=1.0, rho=10.0, p=(0.0, 1.0))
    config = EstimationConfig(degree_range_stage1=(1, 4))
    hits = 0
    for seed in range(10):
        data = simulate(params, SimulationConfig(grid=grid, seed=seed)).dataset
        fit = select_stage1_aic(data.ask, grid, config)
        if 0.45 <= fit.alpha_hat <= 0.55 and fit.degree_hat == 1:
            hits += 1
    assert hits >= 8
