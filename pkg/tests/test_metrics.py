import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from trimodal import metrics
from trimodal.errors import DomainError


def test_pcc_examples():
    assert metrics.pcc([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert metrics.pcc([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    with pytest.raises(metrics.UndefinedCorrelation):
        metrics.pcc([1, 1, 1], [1, 2, 3])
    with pytest.raises(DomainError):
        metrics.pcc([1, 2], [1, 2, 3])


def test_pcc_matches_loop(rng):
    for _ in range(20):
        x, y = rng.normal(size=30), rng.normal(size=30)
        assert abs(metrics.pcc(x, y) - oracles.pearson_loop(list(x), list(y))) < 1e-10


@settings(max_examples=30)
@given(arrays(np.float64, 12, elements=st.floats(-5, 5)), st.floats(0.1, 10), st.floats(-3, 3))
def test_pcc_affine_invariant(x, a, b):
    if np.ptp(x) < 1e-3:
        return
    y = np.sin(np.arange(12.0))
    assert metrics.pcc(a * x + b, y) == pytest.approx(metrics.pcc(x, y), abs=1e-9)


def test_rdm_and_rsa_match_loops(rng):
    X, Y = rng.normal(size=(9, 7)), rng.normal(size=(9, 7))
    A, B = metrics.rdm(X), metrics.rdm(Y)
    np.testing.assert_allclose(A, oracles.rdm_loop(X), atol=1e-10)
    assert np.all(np.diag(A) == 0.0) and np.array_equal(A, A.T)
    assert abs(metrics.rsa(A, B) - oracles.rsa_loop(A, B)) < 1e-10
    assert metrics.rsa(A, A) == pytest.approx(1.0)


def test_rdm_errors(rng):
    with pytest.raises(DomainError):
        metrics.rdm(rng.normal(size=(2, 4)))
    X = rng.normal(size=(4, 3))
    X[2] = 1.0
    with pytest.raises(metrics.UndefinedCorrelation):
        metrics.rdm(X)


def test_retrieval_matches_loop(rng):
    Q, G = rng.normal(size=(25, 6)), rng.normal(size=(25, 6))
    for k in (1, 3, 10):
        assert metrics.retrieval_topk(Q, G, k) == oracles.retrieval_loop(Q, G, k)


def test_retrieval_ties_favour_lower_index():
    G = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    Q = G.copy()
    # query 1 ties with gallery 0 (lower index) so it misses at k=1
    assert metrics.retrieval_topk(Q, G, 1) == pytest.approx(2 / 3)


def test_retrieval_identity_and_errors(rng):
    X = rng.normal(size=(10, 4))
    assert metrics.retrieval_topk(X, X, 1) == 1.0
    with pytest.raises(DomainError):
        metrics.retrieval_topk(X, X, 11)
    with pytest.raises(DomainError):
        metrics.retrieval_topk(X, X, 0)


def test_concept_retrieval():
    gallery = np.array([[0, 0, 0], [1, 1, 1], [2, 2, 2]])
    labels = np.array([0, 1, 2])
    gen = np.array([[0, 0, 1], [1, 1, 2], [0, 2, 2]])
    assert metrics.concept_retrieval_top1(gen, gallery, labels, labels) == 1.0
    assert metrics.concept_retrieval_top1(gen, gallery, labels, np.array([1, 1, 1])) == pytest.approx(1 / 3)


def test_mean_pcc_and_mse():
    a = np.array([[1.0, 2.0, 3.0], [0.0, 1.0, 0.0]])
    assert metrics.mean_pcc(a, a) == pytest.approx(1.0)
    assert metrics.mse(a, a + 2) == 4.0
