import numpy as np
import pytest

from obsimpact.covariance import BackgroundCov, build_background_cov, sample_background_perturbation
from obsimpact.fourdvar import (
    HessVecMethod,
    HessianOperator,
    LBFGSHessianApproximation,
    Scenario,
    cost,
    cost_and_gradient,
    generate_observations,
    gradient,
    hess_vec,
    minimize,
    rms_error,
)
from obsimpact.grid_state import Variable, make_grid
from obsimpact.observations import ObservationSet
from obsimpact.swe_dynamics import ModelConfig, circular_dam_state, fwd_run


def _unit(rng, n):
    u = rng.standard_normal(n)
    return u / np.linalg.norm(u)


@pytest.fixture(scope="module")
def matched_scenario():
    """Observations generated without noise from the background itself, so ``J(x_b) = 0``."""
    grid = make_grid(8, -3, 3)
    model = ModelConfig(dt=1e-3, num_steps=10)
    x_b = circular_dam_state(grid)
    B = build_background_cov(grid, x_b, 0.05, 1.0, 0.05)
    observations = generate_observations(fwd_run(x_b, grid, model, [5, 10]), None, 0.0, None)
    return Scenario(grid, model, x_b, B, observations)


@pytest.fixture(scope="module")
def toy_problem():
    """No model steps and h observed at time 0: the cost is an explicit quadratic."""
    grid = make_grid(4, -3, 3)
    model = ModelConfig(dt=1e-3, num_steps=0)
    reference = circular_dam_state(grid)
    B = build_background_cov(grid, reference, 0.1, 0.7, 0.1)
    x_b = reference + sample_background_perturbation(B, 1)
    rng = np.random.default_rng(2)
    layout = ObservationSet.full_coverage(grid, [0], variables=(Variable.H,))
    y = x_b[: grid.cells] + 1e-3 * rng.standard_normal(grid.cells)
    observations = layout.with_values(y).with_variances(np.full(grid.cells, 1e-2))
    scenario = Scenario(grid, model, x_b, B, observations)

    precision = np.linalg.inv(B.dense())
    obs_precision = np.zeros(grid.n)
    obs_precision[: grid.cells] = 1e2
    hessian = precision + np.diag(obs_precision)
    rhs = precision @ x_b
    rhs[: grid.cells] += 1e2 * y
    return scenario, hessian, np.linalg.solve(hessian, rhs)


def test_cost_vanishes_at_a_perfectly_observed_background(matched_scenario):
    assert cost(matched_scenario.background, matched_scenario) == 0.0
    assert not np.any(gradient(matched_scenario.background, matched_scenario))


def test_background_only_cost_is_quadratic():
    grid = make_grid(6, -3, 3)
    x_b = circular_dam_state(grid)
    scenario = Scenario(
        grid,
        ModelConfig(dt=1e-3, num_steps=3),
        x_b,
        BackgroundCov.identity(grid),
        ObservationSet(grid, ()),
    )
    d = 0.01 * np.random.default_rng(0).standard_normal(grid.n)

    assert cost(x_b + d, scenario) == pytest.approx(0.5 * d @ d, rel=1e-12)
    assert cost(x_b + 2 * d, scenario) == pytest.approx(4 * cost(x_b + d, scenario), rel=1e-12)
    np.testing.assert_allclose(gradient(x_b + d, scenario), d, rtol=1e-12, atol=1e-15)


def test_gradient_matches_central_differences(desk_setup):
    scenario = desk_setup.scenario
    x = scenario.background
    d = sample_background_perturbation(scenario.background_cov, 3)
    value, grad = cost_and_gradient(x, scenario)
    eps = 1e-4

    central = (cost(x + eps * d, scenario) - cost(x - eps * d, scenario)) / (2 * eps)

    assert value == pytest.approx(cost(x, scenario), rel=1e-15)
    assert abs(central - grad @ d) / abs(grad @ d) < 1e-6


def test_zero_direction_warns_and_returns_zero(desk_setup):
    scenario = desk_setup.scenario

    with pytest.warns(RuntimeWarning, match="zero direction"):
        result = hess_vec(scenario.background, np.zeros(scenario.grid.n), scenario)

    assert not np.any(result)


def test_second_order_product_matches_gradient_differences(desk_setup):
    scenario = desk_setup.scenario
    x = scenario.background
    u = _unit(np.random.default_rng(1), scenario.grid.n)
    eps = 1e-4

    exact = hess_vec(x, u, scenario, HessVecMethod.SOA)
    central = (gradient(x + eps * u, scenario) - gradient(x - eps * u, scenario)) / (2 * eps)
    forward = hess_vec(x, u, scenario, "fd_grad")

    assert np.linalg.norm(exact - central) / np.linalg.norm(exact) < 1e-6
    assert np.linalg.norm(exact - forward) / np.linalg.norm(exact) < 1e-4


def test_second_order_product_is_symmetric(desk_setup):
    scenario = desk_setup.scenario
    operator = HessianOperator(scenario, scenario.background)
    rng = np.random.default_rng(2)

    for _ in range(3):
        u, w = _unit(rng, scenario.grid.n), _unit(rng, scenario.grid.n)
        left, right = u @ operator.apply(w), w @ operator.apply(u)
        assert abs(left - right) <= 1e-10 * max(abs(left), np.linalg.norm(operator.apply(u)))


def test_batched_products_match_single_products(desk_setup):
    scenario = desk_setup.scenario
    operator = HessianOperator(scenario, scenario.background)
    directions = np.random.default_rng(3).standard_normal((3, scenario.grid.n))

    batched = operator.apply(directions)

    for row in range(3):
        np.testing.assert_allclose(batched[row], operator.apply(directions[row]), rtol=1e-12, atol=1e-12 * np.abs(batched).max())


def test_gauss_newton_equals_full_hessian_at_zero_residual(matched_scenario):
    x = matched_scenario.background
    u = _unit(np.random.default_rng(4), matched_scenario.grid.n)

    full = hess_vec(x, u, matched_scenario, HessVecMethod.SOA)
    gauss_newton = hess_vec(x, u, matched_scenario, HessVecMethod.GAUSS_NEWTON)

    np.testing.assert_allclose(full, gauss_newton, rtol=1e-12, atol=1e-12 * np.abs(full).max())


def test_gauss_newton_is_positive_semidefinite(desk_setup):
    scenario = desk_setup.scenario
    operator = HessianOperator(scenario, scenario.background, HessVecMethod.GAUSS_NEWTON)
    rng = np.random.default_rng(5)

    for _ in range(5):
        u = rng.standard_normal(scenario.grid.n)
        assert u @ operator.apply(u) >= 0.0


def test_unknown_method_is_rejected():
    with pytest.raises(ValueError, match="fd_grad"):
        HessVecMethod.parse("newton")


def test_minimize_reaches_the_quadratic_optimum(toy_problem):
    scenario, _, optimum = toy_problem
    x_init = scenario.background + 0.05 * np.random.default_rng(6).standard_normal(scenario.grid.n)

    x_a, record = minimize(scenario, x_init, 200)

    assert np.linalg.norm(x_a - optimum) <= 1e-6 * np.linalg.norm(optimum)
    assert np.linalg.norm(gradient(x_a, scenario)) < 1e-6
    assert record.iterations >= 1


def test_minimize_decreases_the_cost(desk_setup):
    scenario = desk_setup.scenario
    x_a, record = minimize(scenario, scenario.background, 10, reference=desk_setup.reference)

    assert cost(x_a, scenario) <= cost(scenario.background, scenario)
    assert all(later <= earlier for earlier, later in zip(record.costs, record.costs[1:]))
    assert set(record.rms) == {"h", "u", "v"}
    assert len(record.rms["h"]) == len(record.costs)


def test_minimize_needs_an_iteration(toy_problem):
    scenario, _, _ = toy_problem

    with pytest.raises(ValueError):
        minimize(scenario, scenario.background, 0)


def test_rms_error_per_variable():
    grid = make_grid(3, 0, 3)
    reference = np.zeros(grid.n)
    x = reference.copy()
    x[grid.variable_slice(Variable.H)] = 0.1
    x[grid.cells] = 3.0

    assert rms_error(x, reference, Variable.H, grid) == pytest.approx(0.1)
    assert rms_error(x, reference, "u", grid) == pytest.approx(1.0)
    assert rms_error(x, reference, Variable.V, grid) == 0.0
    assert rms_error(reference, reference, Variable.H, grid) == 0.0


def test_lbfgs_approximation_satisfies_the_secant_equation():
    rng = np.random.default_rng(7)
    factor = rng.standard_normal((5, 5))
    matrix = factor @ factor.T + 5 * np.eye(5)
    approx = LBFGSHessianApproximation(2)
    for _ in range(3):
        s = rng.standard_normal(5)
        y = matrix @ s
        approx.append(s, y, float(s @ y))

    assert len(approx) == 2
    np.testing.assert_allclose(approx.inverse_action(y), s, rtol=1e-10)
    assert approx.theta == pytest.approx(float(y @ y) / float(s @ y))


def test_lbfgs_approximation_of_a_scaled_identity():
    approx = LBFGSHessianApproximation(3)
    s = np.array([1.0, -2.0, 0.5])
    approx.append(s, 2.0 * s, float(2.0 * s @ s))
    x = np.array([0.3, 0.7, -1.1])

    np.testing.assert_allclose(approx.inverse_action(x), x / 2.0, rtol=1e-14)
    with pytest.raises(ValueError):
        approx.append(s, -s, -float(s @ s))
    approx.reset()
    np.testing.assert_array_equal(approx.inverse_action(x), x)


def test_generated_observations_follow_the_reference(matched_scenario):
    grid, model = matched_scenario.grid, matched_scenario.model
    traj = fwd_run(matched_scenario.background, grid, model, [10])

    perfect = generate_observations(traj, None, 0.0, 0)
    noisy = generate_observations(traj, None, 0.01, 0)

    np.testing.assert_array_equal(perfect.values, traj.final())
    np.testing.assert_array_equal(noisy.values, generate_observations(traj, None, 0.01, 0).values)
    assert not np.array_equal(noisy.values, perfect.values)
    h_max = np.abs(traj.final()[grid.variable_slice(Variable.H)]).max()
    np.testing.assert_allclose(perfect.variances[: grid.cells], (0.01 * h_max) ** 2)


@pytest.mark.slow
def test_relative_cost_of_model_gradient_and_hessian_products():
    import time

    from obsimpact.config import ExperimentConfig
    from obsimpact.experiments import build_twin

    scenario = build_twin(ExperimentConfig()).scenario
    x = scenario.background
    u = _unit(np.random.default_rng(8), scenario.grid.n)

    def best_of(func, repeats=3):
        timings = []
        for _ in range(repeats):
            started = time.perf_counter()
            func()
            timings.append(time.perf_counter() - started)
        return min(timings)

    forward = best_of(lambda: scenario.trajectory(x))
    grad = best_of(lambda: gradient(x, scenario))
    product = best_of(lambda: hess_vec(x, u, scenario))

    assert forward < grad < product
