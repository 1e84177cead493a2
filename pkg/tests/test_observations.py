import numpy as np
import pytest

from obsimpact.grid_state import Variable, make_grid, state_index
from obsimpact.observations import ObservationBlock, ObservationSet


@pytest.fixture
def grid4():
    return make_grid(4, 0, 4)


def test_full_coverage_observes_every_entry(grid4):
    obs = ObservationSet.full_coverage(grid4, [3, 1])

    assert obs.time_indices == (1, 3)
    assert obs.size == 2 * grid4.n
    np.testing.assert_array_equal(obs.indices[: grid4.n], np.arange(grid4.n))
    np.testing.assert_array_equal(obs.variances, 1.0)
    np.testing.assert_array_equal(obs.times()[: grid4.n], 1)


def test_partial_coverage_only_lists_requested_variables(grid4):
    obs = ObservationSet.full_coverage(grid4, [0], variables=(Variable.H,))

    assert obs.size == grid4.cells
    np.testing.assert_array_equal(obs.variables(), Variable.H)


def test_cells_and_variables_decode_indices(grid4):
    index = state_index(grid4, Variable.V, 2, 3)
    block = ObservationBlock(0, [index], [1.5], [0.1])
    obs = ObservationSet(grid4, (block,))

    i, j = obs.cells()
    assert (i[0], j[0]) == (2, 3)
    assert obs.variables()[0] == Variable.V


def test_select_and_scatter_are_transposes(grid4):
    rng = np.random.default_rng(0)
    indices = rng.choice(grid4.n, size=10, replace=False)
    block = ObservationBlock(2, indices, np.zeros(10), np.ones(10))
    x = rng.standard_normal(grid4.n)
    w = rng.standard_normal(10)

    assert block.select(x) @ w == pytest.approx(x @ block.scatter(w, grid4.n), rel=1e-14)


def test_scatter_to_state_gives_one_field_per_time(grid4):
    obs = ObservationSet.full_coverage(grid4, [0, 5], variables=(Variable.U,))
    vector = np.arange(obs.size, dtype=float)

    fields = obs.scatter_to_state(vector)

    assert fields.shape == (2, grid4.n)
    np.testing.assert_array_equal(fields[1, grid4.variable_slice(Variable.U)], vector[grid4.cells :])
    assert not np.any(fields[:, grid4.variable_slice(Variable.H)])


def test_blocks_are_immutable(grid4):
    block = ObservationBlock(0, [1, 2], [0.5, 0.25], [1.0, 1.0])

    with pytest.raises(ValueError):
        block.values[0] = 3.0


@pytest.mark.parametrize(
    "indices, values, variances",
    [
        ([1, 1], [0.0, 0.0], [1.0, 1.0]),
        ([1, 2], [0.0], [1.0, 1.0]),
        ([1, 2], [0.0, 0.0], [1.0, 0.0]),
    ],
)
def test_invalid_blocks_are_rejected(indices, values, variances):
    with pytest.raises(ValueError):
        ObservationBlock(0, indices, values, variances)


def test_indices_outside_the_state_are_rejected(grid4):
    with pytest.raises(ValueError):
        ObservationSet(grid4, (ObservationBlock(0, [grid4.n], [0.0], [1.0]),))


def test_duplicate_times_are_rejected(grid4):
    block = ObservationBlock(0, [0], [0.0], [1.0])

    with pytest.raises(ValueError):
        ObservationSet(grid4, (block, block))


def test_subset_keeps_the_masked_observations(grid4):
    obs = ObservationSet.full_coverage(grid4, [0, 1], variables=(Variable.H,))
    obs = obs.with_values(np.arange(obs.size, dtype=float))
    mask = np.zeros(obs.size, dtype=bool)
    mask[[0, 5, grid4.cells + 2]] = True

    kept = obs.subset(mask)

    assert kept.size == 3
    np.testing.assert_array_equal(kept.values, [0.0, 5.0, grid4.cells + 2.0])
    assert kept.time_indices == (0, 1)


def test_corrupt_scales_every_observation_at_the_cell(grid4):
    obs = ObservationSet.full_coverage(grid4, [0, 2]).with_values(np.ones(2 * grid4.n))

    corrupted = obs.corrupt([(1, 2)], 10.0)

    i, j = corrupted.cells()
    hit = (i == 1) & (j == 2)
    assert hit.sum() == 6
    np.testing.assert_array_equal(corrupted.values[hit], 10.0)
    np.testing.assert_array_equal(corrupted.values[~hit], 1.0)


def test_corrupt_rejects_cells_outside_the_grid(grid4):
    with pytest.raises(ValueError):
        ObservationSet.full_coverage(grid4, [0]).corrupt([(4, 0)], 2.0)


def test_obs_cov_carries_the_variances(grid4):
    obs = ObservationSet.full_coverage(grid4, [0]).with_variances(np.full(grid4.n, 0.25))

    np.testing.assert_array_equal(obs.obs_cov.apply_inverse(np.ones(grid4.n)), 4.0)
