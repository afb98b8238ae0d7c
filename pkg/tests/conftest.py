"""Shared synthetic-instance builders for the test suite."""

import numpy as np

from spectensor.harness import haar_orthonormal
from spectensor.tensor import PLAN_SQUARE, Tensor4, sum_outer4, unreshape


def orthonormal_rows(rng, d, n):
    """n orthonormal vectors in R^d (rows), Haar-distributed."""
    return haar_orthonormal(rng, d, n)


def correlated_orthonormal_pair(rng, d, k, eps):
    """Two orthonormal sets (rows) with <a_i, b_i>^2 = 1 - eps exactly.

    Requires d >= 2k: b_i is rotated from a_i toward a fresh direction c_i
    orthogonal to everything else, so the b_i stay exactly orthonormal.
    """
    assert d >= 2 * k
    basis = orthonormal_rows(rng, d, 2 * k)
    a = basis[:k]
    c = basis[k:]
    b = np.sqrt(1.0 - eps) * a + np.sqrt(eps) * c
    return a, b


def noise_from_symmetric_matrix(rng, d, eps):
    """Noise tensor whose {12}{34} unfolding is symmetric with norm eps."""
    g = rng.standard_normal((d * d, d * d))
    sym = (g + g.T) / 2
    sym *= eps / np.linalg.svd(sym, compute_uv=False)[0]
    return unreshape(sym, PLAN_SQUARE, d)


def analytic_moment_unfolding(a, kappa, pair):
    """Exact E[(Ax)^{x4}] as a {12}{34} unfolding.

    ``a`` holds the dictionary columns as rows, ``kappa`` is the uniform
    4th moment E[x_i^4] and ``pair`` the uniform pairwise moment
    E[x_i^2 x_j^2]; all non-square 4th moments vanish.
    """
    n, d = a.shape
    m = np.zeros((d * d, d * d))
    ws = [np.kron(a[i], a[i]) for i in range(n)]
    outs = [np.outer(a[i], a[i]) for i in range(n)]
    for i in range(n):
        m += kappa * np.outer(ws[i], ws[i])
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            m += pair * np.outer(ws[i], ws[j])
            m += pair * np.kron(outs[i], outs[j])
            m += pair * np.kron(np.outer(a[j], a[i]), np.outer(a[i], a[j]))
    return m


def analytic_moment_tensor(a, kappa, pair):
    return unreshape(analytic_moment_unfolding(a, kappa, pair), PLAN_SQUARE, a.shape[1])


def synthetic_instance(rng, d, n, eps, noise="matrix"):
    """T = sum a_i^{x4} + E with ||E_{12,34}|| = eps; returns (T, a, S_sq)."""
    a = orthonormal_rows(rng, d, n)
    signal = sum_outer4(a)
    if eps == 0 or noise == "none":
        t = signal
    elif noise == "matrix":
        e = noise_from_symmetric_matrix(rng, d, eps)
        t = Tensor4(signal.data + e.data, copy=False)
    elif noise == "identity":
        e = unreshape(eps * np.eye(d * d), PLAN_SQUARE, d)
        t = Tensor4(signal.data + e.data, copy=False)
    else:
        raise ValueError(noise)
    s_sq = signal.reshape(PLAN_SQUARE)
    return t, a, s_sq
