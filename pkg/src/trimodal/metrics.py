"""Similarity metrics: Pearson correlation, MSE, RDMs, RSA and top-k retrieval."""

from __future__ import annotations

import numpy as np

from .errors import DomainError


class UndefinedCorrelation(ValueError):
    """Correlation requested for a constant vector."""


def pcc(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size < 2:
        raise DomainError("pcc needs two vectors of equal length >= 2")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(xc @ xc), np.sqrt(yc @ yc)
    if sx == 0 or sy == 0:
        raise UndefinedCorrelation("zero variance")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def mse(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    return float(np.mean((x - y) ** 2))


def mean_pcc(pred, true) -> float:
    """Average per-row Pearson correlation between two ``(N, D)`` arrays."""
    return float(np.mean([pcc(p, t) for p, t in zip(pred, true)]))


def rdm(features) -> np.ndarray:
    """1 - Pearson dissimilarity matrix with an exact zero diagonal."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise DomainError("rdm needs an (N, E) array with N >= 3")
    Xc = X - X.mean(axis=1, keepdims=True)
    norms = np.sqrt((Xc * Xc).sum(axis=1))
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise UndefinedCorrelation(f"rows with zero variance: {bad.tolist()}")
    Z = Xc / norms[:, None]
    R = np.clip(Z @ Z.T, -1.0, 1.0)
    D = 1.0 - R
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return D


def rsa(rdm_a, rdm_b) -> float:
    """Pearson correlation between the strict upper triangles of two RDMs."""
    A, B = np.asarray(rdm_a), np.asarray(rdm_b)
    if A.shape != B.shape or A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DomainError("RDMs must be square and of equal size")
    if A.shape[0] < 3:
        raise DomainError("rsa needs N >= 3 items")
    iu = np.triu_indices(A.shape[0], k=1)
    return pcc(A[iu], B[iu])


def _cosine(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    gn = g / np.linalg.norm(g, axis=1, keepdims=True)
    return qn @ gn.T


def retrieval_topk(queries, gallery, k: int) -> float:
    """Fraction of queries whose matching gallery row ranks in the top ``k``.

    Row ``i`` of ``gallery`` is the match for query ``i``.  Similarity is cosine;
    a gallery item outranks the match if it is more similar, or equally similar
    with a lower index.
    """
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if k <= 0:
        raise DomainError("k must be positive")
    if k > g.shape[0]:
        raise DomainError("k exceeds gallery size")
    S = _cosine(q, g)
    n = q.shape[0]
    true = S[np.arange(n), np.arange(n)][:, None]
    cols = np.arange(g.shape[0])[None, :]
    ahead = (S > true) | ((S == true) & (cols < np.arange(n)[:, None]))
    rank = ahead.sum(axis=1)
    return float(np.mean(rank < k))


def concept_retrieval_top1(generated, gallery, gallery_labels, true_labels) -> float:
    """Label accuracy of nearest-gallery lookup for generated token sequences.

    Similarity is the number of matching positions; ties go to the lower
    gallery index.  Chance is ``1 / n_labels`` on a balanced gallery.
    """
    G = np.asarray(generated)
    R = np.asarray(gallery)
    agree = (G[:, None, :] == R[None, :, :]).sum(axis=-1)
    best = np.argmax(agree, axis=1)
    return float(np.mean(np.asarray(gallery_labels)[best] == np.asarray(true_labels)))
