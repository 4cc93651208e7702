import numpy as np
import pytest

from mlecs import numeric


def cofactor_det(m):
    m = [list(row) for row in m]
    if len(m) == 1:
        return m[0][0]
    total = 0.0
    for col in range(len(m)):
        minor = [row[:col] + row[col + 1:] for row in m[1:]]
        total += (-1) ** col * m[0][col] * cofactor_det(minor)
    return total


def test_matmul_rejects_mismatched_shapes():
    with pytest.raises(numeric.DimensionMismatchError):
        numeric.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_matches_loops(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    expected = [[sum(a[i, k] * b[k, j] for k in range(4)) for j in range(2)]
                for i in range(3)]
    np.testing.assert_allclose(numeric.matmul(a, b), expected, atol=1e-12)


def test_non_finite_input_rejected():
    with pytest.raises(numeric.NonFiniteError):
        numeric.as_matrix([[1.0, np.nan]])
    with pytest.raises(numeric.DimensionMismatchError):
        numeric.as_vector(np.ones((2, 2)))


def test_gram_of_orthonormal_columns_is_identity():
    np.testing.assert_allclose(numeric.gram(np.eye(4)[:, :2]), np.eye(2))


def test_det_matches_cofactor_expansion(rng):
    for size in (1, 2, 3, 4):
        g = rng.standard_normal((size, size))
        assert numeric.det(g) == pytest.approx(cofactor_det(g), abs=1e-10)


def test_det_sign_of_permutation():
    assert numeric.det(np.eye(3)[[1, 0, 2]]) == pytest.approx(-1.0)
    assert numeric.det(np.eye(3)[[1, 2, 0]]) == pytest.approx(1.0)


def test_det_of_singular_matrix_is_zero():
    assert abs(numeric.det([[1.0, 2.0], [2.0, 4.0]])) < 1e-12


def test_inverse_regularized(rng):
    a = rng.standard_normal((5, 3))
    g = a.T @ a
    np.testing.assert_allclose(numeric.inverse_regularized(g) @ g, np.eye(3),
                               atol=1e-10)
    ridge = numeric.inverse_regularized(g, 0.5)
    np.testing.assert_allclose(ridge @ (g + 0.5 * np.eye(3)), np.eye(3),
                               atol=1e-10)


def test_inverse_regularized_errors():
    with pytest.raises(ValueError):
        numeric.inverse_regularized([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(numeric.SingularMatrixError):
        numeric.inverse_regularized([[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(ValueError):
        numeric.inverse_regularized(np.eye(2), -1.0)
    # a ridge rescues the singular case
    numeric.inverse_regularized([[1.0, 1.0], [1.0, 1.0]], 1e-3)


def test_stacked_helpers_match_single(rng):
    a = rng.standard_normal((4, 5, 3))
    g = np.swapaxes(a, -1, -2) @ a
    dets = numeric.det_stack(g)
    invs = numeric.inverse_regularized_stack(g, 1e-8)
    for ctr in range(4):
        assert dets[ctr] == pytest.approx(numeric.det(g[ctr]), rel=1e-10)
        np.testing.assert_allclose(invs[ctr],
                                   numeric.inverse_regularized(g[ctr], 1e-8),
                                   rtol=1e-8, atol=1e-10)


def test_log_softmax_is_stable_and_normalised():
    out = numeric.log_softmax([1000.0, 1000.0, 0.0])
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(np.log(0.5))
    assert np.exp(out).sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        numeric.log_softmax([])
    with pytest.raises(numeric.NonFiniteError):
        numeric.log_softmax([0.0, np.inf])


def test_kl_divergence():
    p = np.array([0.2, 0.3, 0.5])
    assert numeric.kl_divergence(p, p) == 0.0
    q = np.array([0.5, 0.25, 0.25])
    expected = sum(pi * np.log(pi / qi) for pi, qi in zip(p, q))
    assert numeric.kl_divergence(p, q) == pytest.approx(expected, abs=1e-12)
    # 0 ln 0 = 0
    assert numeric.kl_divergence([0.0, 1.0], [0.5, 0.5]) == \
        pytest.approx(np.log(2.0))
    with pytest.raises(ValueError):
        numeric.kl_divergence([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(numeric.DimensionMismatchError):
        numeric.kl_divergence([1.0], [0.5, 0.5])


def test_kl_divergence_floors_q():
    value = numeric.kl_divergence([0.5, 0.5], [1.0, 0.0])
    assert np.isfinite(value)
    assert value == pytest.approx(0.5 * np.log(0.5 / 1e-12) +
                                  0.5 * np.log(0.5))


def test_gram_is_symmetric_psd_sweep(rng):
    for _ in range(100):
        n, k = rng.integers(1, 7, size=2)
        a = rng.standard_normal((n, k)) * rng.uniform(0.1, 10.0)
        g = numeric.gram(a)
        assert g.shape == (k, k)
        np.testing.assert_allclose(g, g.T, rtol=0,
                                   atol=1e-12 * np.abs(g).max())
        assert np.linalg.eigvalsh(g).min() >= -1e-9


def test_det_of_gram_is_det_squared(rng):
    checked = 0
    while checked < 30:
        size = int(rng.integers(1, 6))
        a = rng.standard_normal((size, size))
        if np.linalg.cond(a) > 1e3:
            continue
        checked += 1
        expected = numeric.det(a) ** 2
        assert numeric.det(numeric.gram(a)) == pytest.approx(expected, rel=1e-8)


def test_log_softmax_shift_invariant(rng):
    for _ in range(50):
        logits = rng.standard_normal(int(rng.integers(1, 9)))
        shift = rng.uniform(-100.0, 100.0)
        np.testing.assert_allclose(numeric.log_softmax(logits + shift),
                                   numeric.log_softmax(logits),
                                   rtol=0, atol=1e-12)


def test_kl_nonnegative_and_zero_only_on_equal(rng):
    for _ in range(100):
        size = int(rng.integers(2, 9))
        p = rng.dirichlet(np.ones(size))
        q = rng.dirichlet(np.ones(size))
        assert numeric.kl_divergence(p, q) > 0.0
        assert numeric.kl_divergence(q, p) > 0.0
        assert numeric.kl_divergence(p, p) == 0.0


def test_grad_check_accepts_correct_gradient(rng):
    x = rng.standard_normal(6)
    report = numeric.grad_check(lambda v: float(np.sum(v ** 3)), x, 3 * x ** 2)
    assert report.max_rel_err < 1e-6


def test_grad_check_flags_wrong_gradient(rng):
    x = rng.standard_normal(4) + 3.0
    report = numeric.grad_check(lambda v: float(np.sum(v ** 2)), x, x)
    assert report.max_rel_err > 0.4


def test_grad_check_errors():
    with pytest.raises(ValueError):
        numeric.grad_check(lambda v: 0.0, np.zeros(2), np.zeros(2), h=0.0)
    with pytest.raises(numeric.NonFiniteError) as excinfo:
        numeric.grad_check(lambda v: np.inf if v[1] != 0 else 0.0,
                           np.zeros(2), np.zeros(2))
    assert 'index 1' in str(excinfo.value)

# end
