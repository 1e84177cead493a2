import numpy as np
import pytest

from obsimpact.errors import CFLViolationError, ModelStateError
from obsimpact.grid_state import make_grid, state_index
from obsimpact.swe_dynamics import (
    ModelConfig,
    adj_run,
    cfl_number,
    circular_dam_state,
    fwd_run,
    fwd_step,
    soa_run,
    tlm_run,
    total_mass,
)


def _bumpy_state(grid, seed=0):
    """Circular dam plus a small smooth random disturbance in every variable."""
    rng = np.random.default_rng(seed)
    state = circular_dam_state(grid)
    return state + 0.01 * rng.standard_normal(grid.n)


@pytest.fixture
def grid10():
    return make_grid(10, -3, 3)


def test_uniform_rest_state_is_steady():
    grid = make_grid(6, 0, 6)
    state = np.concatenate([np.full(grid.cells, 2.5), np.zeros(2 * grid.cells)])

    np.testing.assert_array_equal(fwd_step(state, grid, ModelConfig(dt=0.01, num_steps=1)), state)


def test_mass_is_conserved(grid10):
    config = ModelConfig(dt=1e-3, num_steps=30)
    traj = fwd_run(_bumpy_state(grid10), grid10, config)

    masses = [total_mass(state, grid10) for state in traj.states]
    assert max(abs(m - masses[0]) for m in masses) <= 1e-12 * masses[0]


def test_rotation_symmetry_is_preserved():
    grid = make_grid(20, -3, 3)
    offsets = np.arange(grid.q) - (grid.q - 1) / 2.0
    r2 = (offsets[:, None] ** 2 + offsets[None, :] ** 2) * grid.dx**2
    h = 1.0 + np.exp(-r2 / (2 * 0.25))
    state = np.concatenate([h.ravel(), np.zeros(2 * grid.cells)])

    traj = fwd_run(state, grid, ModelConfig(dt=1e-3, num_steps=10))
    final_h = grid.split(traj.final())[0]

    assert np.max(np.abs(final_h - np.rot90(final_h))) < 1e-12


def test_zero_steps_keeps_only_initial_state(grid10):
    x0 = circular_dam_state(grid10)
    traj = fwd_run(x0, grid10, ModelConfig(dt=1e-3, num_steps=0), obs_times=[0])

    assert traj.states.shape == (1, grid10.n)
    np.testing.assert_array_equal(traj.states[0], x0)


def test_runs_are_bit_reproducible(grid10):
    config = ModelConfig(dt=1e-3, num_steps=15)
    x0 = _bumpy_state(grid10)

    first = fwd_run(x0, grid10, config)
    second = fwd_run(x0, grid10, config)

    assert first.states.tobytes() == second.states.tobytes()
    np.testing.assert_array_equal(first.states[5], fwd_step(first.states[4], grid10, config))


def test_collapsing_dam_lowers_the_center_and_spreads_outward():
    grid = make_grid(40, -3, 3)
    x0 = circular_dam_state(grid)
    traj = fwd_run(x0, grid, ModelConfig(dt=1e-4, num_steps=100))

    h0 = grid.split(x0)[0]
    hN = grid.split(traj.final())[0]
    assert hN[19:21, 19:21].max() < h0[19:21, 19:21].max()
    ring = (slice(19, 21), slice(27, 29))
    assert hN[ring].max() > h0[ring].max()


def test_cfl_violation_reports_the_step(grid10):
    state = circular_dam_state(grid10)
    config = ModelConfig(dt=0.5, num_steps=3)
    assert cfl_number(state, grid10, config) > 1

    with pytest.raises(CFLViolationError) as excinfo:
        fwd_run(state, grid10, config)

    assert excinfo.value.step == 0


def test_non_positive_thickness_is_rejected(grid10):
    state = circular_dam_state(grid10)
    state[state_index(grid10, "h", 3, 3)] = -1.0

    with pytest.raises(ModelStateError):
        fwd_step(state, grid10, ModelConfig(dt=1e-3, num_steps=1))


def test_tlm_of_zero_is_zero(grid10):
    traj = fwd_run(_bumpy_state(grid10), grid10, ModelConfig(dt=1e-3, num_steps=5), obs_times=[2, 5])

    snapshot = tlm_run(traj, np.zeros(grid10.n))

    assert snapshot.obs_times == (2, 5)
    assert not np.any(snapshot.perturbations)


def test_tlm_is_linear(grid10):
    traj = fwd_run(_bumpy_state(grid10), grid10, ModelConfig(dt=1e-3, num_steps=8), obs_times=[8])
    d = np.random.default_rng(1).standard_normal(grid10.n)

    np.testing.assert_array_equal(tlm_run(traj, 2.0 * d).at_time(8), 2.0 * tlm_run(traj, d).at_time(8))


def test_tlm_matches_finite_differences_to_first_order(grid10):
    config = ModelConfig(dt=1e-3, num_steps=20)
    x0 = _bumpy_state(grid10)
    d = np.random.default_rng(2).standard_normal(grid10.n)
    d[: grid10.cells] *= 0.1
    traj = fwd_run(x0, grid10, config, obs_times=[20])
    tangent = tlm_run(traj, d).at_time(20)

    def error(eps):
        perturbed = fwd_run(x0 + eps * d, grid10, config).final()
        return np.linalg.norm((perturbed - traj.final()) / eps - tangent) / np.linalg.norm(tangent)

    errors = [error(eps) for eps in (1e-3, 1e-4, 1e-5)]
    assert errors[0] > errors[1] > errors[2]
    assert 8.0 <= errors[1] / errors[2] <= 12.0


def test_tlm_and_adjoint_pass_the_dot_product_test(grid10):
    obs_times = [0, 7, 20]
    traj = fwd_run(_bumpy_state(grid10), grid10, ModelConfig(dt=1e-3, num_steps=20), obs_times=obs_times)
    rng = np.random.default_rng(4)

    for _ in range(10):
        d = rng.standard_normal(grid10.n)
        forcings = [rng.standard_normal(grid10.n) for _ in obs_times]
        snapshot = tlm_run(traj, d)
        forward = sum(float(snapshot.at_time(k) @ f) for k, f in zip(obs_times, forcings))
        backward = float(d @ adj_run(traj, forcings))
        assert abs(forward - backward) <= 1e-12 * max(abs(forward), 1.0)


def test_adjoint_of_zero_forcing_is_zero(grid10):
    traj = fwd_run(_bumpy_state(grid10), grid10, ModelConfig(dt=1e-3, num_steps=4), obs_times=[4])

    assert not np.any(adj_run(traj, [np.zeros(grid10.n)]))


def test_single_step_adjoint_stays_in_the_stencil(grid10):
    traj = fwd_run(_bumpy_state(grid10), grid10, ModelConfig(dt=1e-3, num_steps=1), obs_times=[1])
    forcing = np.zeros(grid10.n)
    forcing[state_index(grid10, "h", 5, 5)] = 1.0

    fields = grid10.split(adj_run(traj, [forcing]))
    support = np.argwhere(np.any(fields != 0.0, axis=0))

    assert support.size
    assert np.all(np.abs(support - 5) <= 1)


def test_adjoint_accepts_a_batch_of_forcings(grid10):
    traj = fwd_run(_bumpy_state(grid10), grid10, ModelConfig(dt=1e-3, num_steps=3), obs_times=[3])
    forcings = np.random.default_rng(5).standard_normal((4, grid10.n))

    batched = adj_run(traj, [forcings])

    for row in range(4):
        np.testing.assert_allclose(batched[row], adj_run(traj, [forcings[row]]), rtol=1e-14, atol=1e-14)


def test_soa_of_zero_direction_with_constant_forcing_is_zero(grid10):
    traj = fwd_run(_bumpy_state(grid10), grid10, ModelConfig(dt=1e-3, num_steps=4), obs_times=[4])
    forcing = np.random.default_rng(6).standard_normal(grid10.n)

    assert not np.any(soa_run(traj, np.zeros(grid10.n), [forcing], [None]))


def test_soa_matches_central_differences_of_the_adjoint(grid10):
    config = ModelConfig(dt=1e-3, num_steps=10)
    x0 = _bumpy_state(grid10)
    rng = np.random.default_rng(7)
    direction = rng.standard_normal(grid10.n)
    direction /= np.linalg.norm(direction)
    forcing = rng.standard_normal(grid10.n)
    weights = rng.uniform(0.5, 2.0, grid10.n)

    def gradient_at(x):
        traj = fwd_run(x, grid10, config, obs_times=[10])
        return adj_run(traj, [forcing + weights * traj.final()])

    traj = fwd_run(x0, grid10, config, obs_times=[10])
    exact = soa_run(traj, direction, [forcing + weights * traj.final()], [lambda dx: weights * dx])
    eps = 1e-5
    central = (gradient_at(x0 + eps * direction) - gradient_at(x0 - eps * direction)) / (2 * eps)

    assert np.linalg.norm(exact - central) / np.linalg.norm(central) < 1e-6


def test_soa_without_forcing_reduces_to_adjoint_of_tangent_forcing(grid10):
    config = ModelConfig(dt=1e-3, num_steps=1, gravity=0.0)
    traj = fwd_run(_bumpy_state(grid10), grid10, config, obs_times=[0, 1])
    direction = np.random.default_rng(8).standard_normal(grid10.n)
    jacobians = [lambda dx: 3.0 * dx, lambda dx: -dx]

    result = soa_run(traj, direction, [np.zeros(grid10.n), np.zeros(grid10.n)], jacobians)
    tangent = tlm_run(traj, direction)
    expected = adj_run(traj, [jacobians[0](tangent.at_time(0)), jacobians[1](tangent.at_time(1))])

    np.testing.assert_allclose(result, expected, rtol=1e-12, atol=1e-12)


def test_shape_mismatch_raises(grid10):
    traj = fwd_run(circular_dam_state(grid10), grid10, ModelConfig(dt=1e-3, num_steps=2), obs_times=[2])

    with pytest.raises(ValueError):
        tlm_run(traj, np.zeros(grid10.n + 1))
    with pytest.raises(ValueError):
        adj_run(traj, [np.zeros(grid10.n), np.zeros(grid10.n)])
