import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cirlab.embedding import (cosine_distance, cosine_similarity, l2_normalize,
                              similarity_matrix)
from cirlab.errors import DimMismatch, ZeroVector

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def nonzero_vectors(dim):
    return arrays(np.float64, dim, elements=finite).filter(lambda v: np.linalg.norm(v) > 1e-3)


def test_l2_normalize():
    np.testing.assert_allclose(l2_normalize([3, 4]), [0.6, 0.8])
    np.testing.assert_array_equal(l2_normalize([1, 0]), [1, 0])
    with pytest.raises(ZeroVector):
        l2_normalize([0, 0])


def test_l2_normalize_rejects_nan():
    with pytest.raises(ValueError):
        l2_normalize([np.nan, 1.0])


def test_cosine_examples():
    e = l2_normalize([0.3, -1.2, 2.0])
    assert cosine_similarity(e, e) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 0], [0.6, 0.8]) == pytest.approx(0.6)
    assert cosine_distance(e, e) == pytest.approx(0.0, abs=1e-12)
    assert cosine_distance([1, 0], [0, 1]) == 1.0
    assert cosine_distance([1, 0], [0.6, 0.8]) == pytest.approx(0.4)


def test_cosine_errors():
    with pytest.raises(DimMismatch):
        cosine_similarity([1, 0], [1, 0, 0])
    with pytest.raises(ZeroVector):
        cosine_similarity([0, 0], [1, 0])


def test_cosine_is_clamped():
    v = np.array([1e-8, 1.0, 1e8])
    assert -1.0 <= cosine_similarity(v, v * 3.0) <= 1.0


def test_similarity_matrix_examples():
    np.testing.assert_allclose(similarity_matrix(np.eye(2), np.eye(2)), np.eye(2))
    m = similarity_matrix([[1, 0]], [[0.6, 0.8]])
    assert m.shape == (1, 1) and m[0, 0] == pytest.approx(0.6)
    with pytest.raises(DimMismatch):
        similarity_matrix(np.ones((2, 3)), np.ones((2, 4)))


@settings(max_examples=50)
@given(nonzero_vectors(5), nonzero_vectors(5), st.floats(0.01, 100), st.floats(0.01, 100))
def test_cosine_symmetric_and_scale_invariant(a, b, alpha, beta):
    c = cosine_similarity(a, b)
    assert c == pytest.approx(cosine_similarity(b, a), abs=1e-9)
    assert cosine_similarity(alpha * a, beta * b) == pytest.approx(c, abs=1e-9)
    assert cosine_distance(a, a) == pytest.approx(0.0, abs=1e-9)


@settings(max_examples=30)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_similarity_matrix_matches_entrywise(n, m, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.standard_normal((n, 4)), rng.standard_normal((m, 4))
    S = similarity_matrix(A, B)
    for i in range(n):
        for j in range(m):
            assert S[i, j] == pytest.approx(cosine_similarity(A[i], B[j]), abs=1e-12)
