import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lcclab.linalg import DegenerateVectorWarning, complete_basis, cosine_similarity, frobenius_rel_error, svd_thin

from oracles import singular_values_oracle


def _orth_dev(q):
    return np.abs(q.T @ q - np.eye(q.shape[1])).max()


def test_diag_matrix():
    f = svd_thin(np.diag([2.0, 1.0]))
    np.testing.assert_allclose(f.sigma, [2.0, 1.0])
    np.testing.assert_allclose(np.abs(f.U), np.eye(2))
    np.testing.assert_allclose(f.V, np.eye(2))


def test_zero_matrix_gives_orthonormal_factors():
    f = svd_thin(np.zeros((4, 3)))
    assert np.all(f.sigma == 0)
    assert _orth_dev(f.U) < 1e-12
    assert _orth_dev(f.V) < 1e-12


def test_rank_one():
    u = np.array([1.0, 2.0, 3.0])
    v = np.array([0.5, -1.0])
    f = svd_thin(np.outer(u, v))
    assert f.sigma[0] == pytest.approx(np.linalg.norm(u) * np.linalg.norm(v))
    assert f.sigma[1] == pytest.approx(0.0, abs=1e-12)
    assert frobenius_rel_error(np.outer(u, v), f.reconstruct()) < 1e-12


def test_wide_matrix_transposes():
    m = np.random.default_rng(1).standard_normal((3, 7))
    f = svd_thin(m)
    assert f.U.shape == (3, 3) and f.V.shape == (7, 3)
    assert frobenius_rel_error(m, f.reconstruct()) < 1e-12


def test_sign_convention():
    m = np.random.default_rng(2).standard_normal((20, 6))
    v = svd_thin(m).V
    lead = v[np.argmax(np.abs(v), axis=0), np.arange(v.shape[1])]
    assert np.all(lead >= 0)


def test_deterministic():
    m = np.random.default_rng(3).standard_normal((30, 8))
    a, b = svd_thin(m), svd_thin(m)
    assert np.array_equal(a.V, b.V) and np.array_equal(a.sigma, b.sigma)


def test_nonfinite_rejected_with_index():
    m = np.ones((3, 3))
    m[1, 2] = np.nan
    with pytest.raises(ValueError, match=r"\(1, 2\)"):
        svd_thin(m)


def test_oversize_rejected():
    with pytest.raises(ValueError, match="desk-scale"):
        svd_thin(np.zeros((600, 600)))


def test_matches_oracle_singular_values():
    rng = np.random.default_rng(4)
    for _ in range(10):
        m = rng.standard_normal((rng.integers(2, 40), rng.integers(1, 20)))
        np.testing.assert_allclose(svd_thin(m).sigma, singular_values_oracle(m), rtol=1e-8, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(
    arrays(
        np.float64,
        st.tuples(st.integers(1, 24), st.integers(1, 12)),
        elements=st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False),
    )
)
def test_reconstruction_property(m):
    f = svd_thin(m)
    scale = max(np.linalg.norm(m), 1.0)
    assert np.linalg.norm(m - f.reconstruct()) / scale < 1e-10
    assert _orth_dev(f.V) < 1e-10
    assert _orth_dev(f.U) < 1e-8
    assert np.all(np.diff(f.sigma) <= 1e-12 * scale)
    assert np.all(f.sigma >= 0)


def test_complete_basis_extends_and_keeps_prefix():
    q = np.linalg.qr(np.random.default_rng(5).standard_normal((6, 2)))[0]
    full = complete_basis(q)
    assert full.shape == (6, 6)
    np.testing.assert_array_equal(full[:, :2], q)
    assert _orth_dev(full) < 1e-12


def test_cosine_similarity():
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 1], [2, 2]) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        cosine_similarity([1, 2], [1, 2, 3])


def test_cosine_zero_vector_warns():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        assert cosine_similarity([0, 0], [1, 2]) == 0.0
    assert any(issubclass(x.category, DegenerateVectorWarning) for x in w)
