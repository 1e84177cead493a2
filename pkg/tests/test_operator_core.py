import numpy as np
import pytest

from obsimpact.errors import NegativeCurvatureError
from obsimpact.operator_core import (
    LinearOperatorHandle,
    Which,
    cg_solve,
    dense_svd,
    dense_symeig,
    estimate_norm,
    lanczos_extremal,
    map_rows,
    qr_orthonormalize,
)


def _spd(n, seed, shift=1.0):
    factor = np.random.default_rng(seed).standard_normal((n, n))
    return factor @ factor.T / n + shift * np.eye(n)


def test_cg_on_the_identity_takes_one_step():
    b = np.array([3.0, -1.0, 2.0])

    result = cg_solve(LinearOperatorHandle.from_matrix(np.eye(3)), b)

    np.testing.assert_allclose(result.x, b)
    assert result.converged
    assert result.iterations == 1


def test_cg_solves_a_small_system():
    A = LinearOperatorHandle.from_matrix(np.array([[4.0, 1.0], [1.0, 3.0]]))

    result = cg_solve(A, np.array([1.0, 2.0]))

    np.testing.assert_allclose(result.x, [1.0 / 11.0, 7.0 / 11.0], rtol=1e-12)
    assert result.iterations <= 2


def test_cg_reaches_the_requested_residual():
    matrix = _spd(50, 0)
    b = np.random.default_rng(1).standard_normal(50)

    result = cg_solve(LinearOperatorHandle.from_matrix(matrix), b, tol=1e-10)

    assert result.converged
    assert np.linalg.norm(matrix @ result.x - b) <= 1e-8 * np.linalg.norm(b)
    assert result.residual_history[0] == pytest.approx(np.linalg.norm(b))


def test_cg_with_zero_right_hand_side():
    result = cg_solve(LinearOperatorHandle.from_matrix(np.eye(4)), np.zeros(4))

    assert result.converged and result.iterations == 0
    assert not np.any(result.x)


def test_cg_reports_negative_curvature():
    A = LinearOperatorHandle.from_matrix(np.diag([1.0, -1.0]))

    with pytest.raises(NegativeCurvatureError) as excinfo:
        cg_solve(A, np.array([1.0, 1.0]))

    assert excinfo.value.iteration == 1
    assert excinfo.value.phase == "cg"
    np.testing.assert_array_equal(excinfo.value.iterate, [0.0, 0.0])


def test_cg_rejects_non_symmetric_operators():
    A = LinearOperatorHandle.from_matrix(np.array([[1.0, 2.0], [0.0, 1.0]]))

    assert not A.symmetric
    with pytest.raises(ValueError):
        cg_solve(A, np.ones(2))


def test_cg_stops_at_the_iteration_cap():
    matrix = np.diag(np.arange(1.0, 21.0))

    result = cg_solve(LinearOperatorHandle.from_matrix(matrix), np.ones(20), tol=1e-14, max_iters=3)

    assert not result.converged
    assert result.iterations == 3


def test_norm_estimate_finds_the_dominant_eigenvalue():
    A = LinearOperatorHandle.from_matrix(np.diag([1.0, 2.0, 10.0]))

    assert estimate_norm(A) == pytest.approx(10.0, rel=1e-9)


def test_lanczos_smallest_of_a_diagonal():
    A = LinearOperatorHandle.from_matrix(np.diag(np.arange(1.0, 11.0)))

    pairs = lanczos_extremal(A, 2, Which.SMALLEST)

    np.testing.assert_allclose(pairs.values, [1.0, 2.0], atol=1e-8)
    assert pairs.converged
    np.testing.assert_allclose(np.abs(pairs.vectors[0, 0]), 1.0, atol=1e-8)


def test_lanczos_full_spectrum_and_orthonormality():
    matrix = _spd(20, 2)

    pairs = lanczos_extremal(LinearOperatorHandle.from_matrix(matrix), 20, "largest")

    np.testing.assert_allclose(pairs.values, np.linalg.eigvalsh(matrix), atol=1e-10)
    np.testing.assert_allclose(pairs.vectors.T @ pairs.vectors, np.eye(20), atol=1e-12)
    np.testing.assert_allclose(matrix @ pairs.vectors, pairs.vectors * pairs.values, atol=1e-8)


def test_lanczos_largest_of_a_larger_operator():
    eigenvalues = np.linspace(1.0, 100.0, 100)
    A = LinearOperatorHandle.from_matrix(np.diag(eigenvalues))

    pairs = lanczos_extremal(A, 3, Which.LARGEST)

    np.testing.assert_allclose(pairs.values, eigenvalues[-3:], rtol=1e-8)
    assert pairs.converged
    assert pairs.subspace_size >= 16


def test_lanczos_continues_past_an_invariant_subspace():
    A = LinearOperatorHandle.from_matrix(np.diag([1.0, 1.0, 1.0, 5.0, 5.0, 5.0]))

    pairs = lanczos_extremal(A, 6, Which.SMALLEST)

    np.testing.assert_allclose(pairs.values, [1.0, 1.0, 1.0, 5.0, 5.0, 5.0], atol=1e-10)


@pytest.mark.parametrize("p", [0, 11])
def test_lanczos_rejects_out_of_range_counts(p):
    with pytest.raises(ValueError):
        lanczos_extremal(LinearOperatorHandle.from_matrix(np.eye(10)), p)


def test_qr_drops_dependent_columns():
    e1, e2 = np.eye(4)[:, 0], np.eye(4)[:, 1]
    columns = np.column_stack([e1, 2.0 * e1, np.zeros(4), e2])

    result = qr_orthonormalize(columns)

    assert result.effective_rank == 2
    np.testing.assert_array_equal(result.retained, [0, 3])


def test_qr_spans_the_input():
    columns = np.random.default_rng(3).standard_normal((10, 4))

    result = qr_orthonormalize(columns)

    assert result.effective_rank == 4
    np.testing.assert_allclose(result.q.T @ result.q, np.eye(4), atol=1e-14)
    np.testing.assert_allclose(result.q @ (result.q.T @ columns), columns, atol=1e-12)


def test_qr_keeps_at_most_the_row_count():
    result = qr_orthonormalize(np.random.default_rng(4).standard_normal((3, 5)))

    assert result.effective_rank == 3


def test_dense_svd_reconstructs_the_matrix():
    matrix = np.random.default_rng(5).standard_normal((6, 4))

    svd = dense_svd(matrix)

    np.testing.assert_allclose(svd.reconstruct(), matrix, atol=1e-12)
    assert np.all(np.diff(svd.s) <= 0)
    np.testing.assert_allclose(svd.v.T @ svd.v, np.eye(4), atol=1e-12)


def test_dense_symeig_is_ascending_and_exact():
    matrix = _spd(8, 6)

    eig = dense_symeig(matrix)

    assert np.all(np.diff(eig.s) >= 0)
    np.testing.assert_allclose(eig.reconstruct(), matrix, atol=1e-12)


def test_operator_handle_round_trips_through_dense():
    matrix = np.random.default_rng(7).standard_normal((5, 5))
    handle = LinearOperatorHandle.from_matrix(matrix)

    np.testing.assert_allclose(handle.to_dense(), matrix, atol=1e-14)
    with pytest.raises(ValueError):
        handle(np.ones(4))


@pytest.mark.parametrize("n_jobs", [1, 2, -1])
def test_map_rows_keeps_submission_order(n_jobs):
    rows = np.arange(21.0).reshape(7, 3)

    result = map_rows(lambda block: 2.0 * block, rows, n_jobs)

    np.testing.assert_array_equal(result, 2.0 * rows)


def test_parallel_columns_match_serial_columns():
    matrix = _spd(12, 8)
    columns = np.random.default_rng(9).standard_normal((12, 5))
    serial = LinearOperatorHandle(12, lambda v: v @ matrix.T)
    threaded = LinearOperatorHandle(12, lambda v: v @ matrix.T, n_jobs=3)

    np.testing.assert_allclose(threaded.apply_columns(columns), serial.apply_columns(columns), rtol=1e-14, atol=1e-14)
