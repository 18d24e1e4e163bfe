"""Brute-force reference computations shared by several test modules.

Kept deliberately naive and independent of the code paths they check.
"""

import itertools

import numpy as np


def dense_matrix(apply, n_in, dtype=complex):
    """Materialize a linear map by feeding it the standard basis."""
    cols = []
    for i in range(n_in):
        e = np.zeros(n_in, dtype)
        e[i] = 1
        cols.append(np.asarray(apply(e)).reshape(-1))
    return np.stack(cols, axis=1)


def sparse_supports_with_zero_residual(A, y, max_k, tol=1e-9):
    """All supports of size <= max_k whose least-squares fit leaves (numerically) no residual."""
    n = A.shape[1]
    ynorm2 = np.vdot(y, y).real
    hits = []
    G = A.conj().T @ A
    b = A.conj().T @ y
    if max_k >= 1:
        res = ynorm2 - np.abs(b) ** 2 / np.real(np.diag(G))
        hits += [(i,) for i in np.flatnonzero(res <= tol * ynorm2)]
    if max_k >= 2:
        i, j = np.triu_indices(n, 1)
        g11, g22, g12 = G[i, i], G[j, j], G[i, j]
        det = (g11 * g22 - g12 * np.conj(g12)).real
        ok = np.abs(det) > 1e-12
        c1 = np.where(ok, (g22 * b[i] - g12 * b[j]) / np.where(ok, det, 1), 0)
        c2 = np.where(ok, (g11 * b[j] - np.conj(g12) * b[i]) / np.where(ok, det, 1), 0)
        res = ynorm2 - np.real(np.conj(b[i]) * c1 + np.conj(b[j]) * c2)
        sel = ok & (res <= tol * ynorm2)
        hits += list(zip(i[sel], j[sel]))
    if max_k >= 3:
        for s in itertools.combinations(range(n), 3):
            c, *_ = np.linalg.lstsq(A[:, s], y, rcond=None)
            if np.linalg.norm(A[:, s] @ c - y) ** 2 <= tol * ynorm2:
                hits.append(s)
    return hits


def best_k_support(A, y, k):
    """Exhaustive least squares over all supports of size k; returns the best support."""
    best, best_res = None, np.inf
    for s in itertools.combinations(range(A.shape[1]), k):
        c, *_ = np.linalg.lstsq(A[:, s], y, rcond=None)
        r = np.linalg.norm(A[:, s] @ c - y)
        if r < best_res:
            best, best_res = s, r
    return set(best), best_res


def naive_ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Per-window double loop over every valid window position."""
    ax = np.arange(window) - (window - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    H, W = a.shape
    vals = []
    for i in range(H - window + 1):
        for j in range(W - window + 1):
            pa = a[i : i + window, j : j + window]
            pb = b[i : i + window, j : j + window]
            ma, mb = np.sum(w * pa), np.sum(w * pb)
            va = np.sum(w * (pa - ma) ** 2)
            vb = np.sum(w * (pb - mb) ** 2)
            cov = np.sum(w * (pa - ma) * (pb - mb))
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))
