import numpy as np
import pytest

from pidkit.errors import InfeasibilityError
from pidkit.sinkhorn import marginal_residual, scale_to_marginals


def uniform_targets(n, k):
    rows = np.full((n, k), 1.0 / (n * k))
    cols = np.full((n, k), 1.0 / (n * k))
    return rows, cols


def test_fixed_point_returned_unchanged():
    rng = np.random.default_rng(0)
    n, k = 5, 3
    rows = rng.dirichlet(np.ones(n * k)).reshape(n, k)
    cols_mass = rows.sum(axis=0)
    cols = rng.dirichlet(np.ones(n), size=k).T * cols_mass
    a = rows[:, None, :] * cols[None, :, :] / cols_mass[None, None, :]
    coupling, residual, _ = scale_to_marginals(a, rows, cols, max_iters=50, tol=1e-13)
    assert np.abs(coupling - a).max() < 1e-12
    assert residual < 1e-12


def test_all_ones_with_uniform_targets_gives_uniform():
    n, k = 4, 2
    rows, cols = uniform_targets(n, k)
    coupling, residual, _ = scale_to_marginals(np.ones((n, n, k)), rows, cols,
                                               max_iters=10, tol=1e-12)
    assert np.allclose(coupling, 1.0 / (n * n * k), atol=1e-12)
    assert residual < 1e-12


def test_random_positive_reaches_small_residual():
    rng = np.random.default_rng(1)
    n, k = 16, 3
    a = np.exp(rng.standard_normal((n, n, k)))
    rows = rng.dirichlet(np.ones(n * k)).reshape(n, k)
    cols = rng.dirichlet(np.ones(n), size=k).T * rows.sum(axis=0)
    coupling, residual, _ = scale_to_marginals(a, rows, cols, max_iters=200, tol=0.0)
    assert residual <= 1e-6
    assert coupling.sum() == pytest.approx(1.0, abs=1e-9)


def test_residual_decreases_monotonically_with_iterations():
    rng = np.random.default_rng(2)
    n, k = 8, 2
    a = np.exp(rng.standard_normal((n, n, k)))
    rows = rng.dirichlet(np.ones(n * k)).reshape(n, k)
    cols = rng.dirichlet(np.ones(n), size=k).T * rows.sum(axis=0)
    residuals = [scale_to_marginals(a, rows, cols, max_iters=m, tol=0.0)[1]
                 for m in range(1, 30)]
    diffs = np.diff(residuals)
    assert np.all(diffs <= 1e-12)


def test_mass_mismatch_is_infeasible():
    n, k = 3, 2
    rows = np.full((n, k), 1.0 / (n * k))
    cols = rows.copy()
    cols[:, 0] *= 2.0
    with pytest.raises(InfeasibilityError):
        scale_to_marginals(np.ones((n, n, k)), rows, cols)


def test_zero_target_rows_stay_zero():
    rng = np.random.default_rng(3)
    n, k = 4, 2
    a = np.exp(rng.standard_normal((n, n, k)))
    rows = rng.dirichlet(np.ones(n * k)).reshape(n, k)
    rows[0, 0] = 0.0
    rows /= rows.sum()
    cols = rng.dirichlet(np.ones(n), size=k).T * rows.sum(axis=0)
    coupling, residual, _ = scale_to_marginals(a, rows, cols, max_iters=300, tol=1e-10)
    assert np.all(coupling[0, :, 0] == 0.0)
    assert residual <= 1e-9


def test_tree_support_is_solved_exactly():
    # Support [[+,+],[+,0]] admits exactly one coupling; peeling finds it.
    r = np.array([2 / 3, 1 / 3])
    c = np.array([2 / 3, 1 / 3])
    a = np.array([[1.0, 1.0], [1.0, 0.0]])[:, :, None]
    coupling, residual, _ = scale_to_marginals(a, r[:, None], c[:, None],
                                               max_iters=50, tol=1e-12)
    expected = np.array([[1 / 3, 1 / 3], [1 / 3, 0.0]])
    assert np.abs(coupling[:, :, 0] - expected).max() < 1e-12
    assert residual < 1e-12


def test_marginal_residual_reports_max_deviation():
    coupling = np.full((2, 2, 1), 0.25)
    rows = np.array([[0.5], [0.5]])
    cols = np.array([[0.6], [0.4]])
    assert marginal_residual(coupling, rows, cols) == pytest.approx(0.1)
