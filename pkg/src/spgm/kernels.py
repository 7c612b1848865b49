"""Hot numeric kernels.

Each kernel has one definition that runs either jitted or as plain numpy
(see :mod:`spgm._accel`). Where a vectorized numpy formulation is markedly
faster than an interpreted loop, the numpy path uses that instead.
"""
import numpy as np

from ._accel import USE_NUMBA, optional_njit


@optional_njit()
def project_simplex(v):
    """Euclidean projection of ``v`` onto the probability simplex."""
    n = v.shape[0]
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    rho = 0
    for j in range(n):
        if u[j] + (1.0 - css[j]) / (j + 1) > 0.0:
            rho = j
    theta = (css[rho] - 1.0) / (rho + 1)
    return np.maximum(v - theta, 0.0)


@optional_njit()
def moreau_max(z):
    """Value and gradient of the Moreau envelope of ``max`` at ``z``.

    The prox of ``max`` is ``z - P(z)`` with ``P`` the simplex projection, so
    the envelope equals ``max(z - P(z)) + |P(z)|^2 / 2`` and its gradient is
    ``P(z)``.
    """
    p = project_simplex(z)
    prox = z - p
    return np.max(prox) + 0.5 * np.dot(p, p), p


@optional_njit()
def simplex_qp_apg(a, K, inv_L, alpha0, step, max_iter, tol):
    """Maximize ``a.alpha - inv_L/2 * alpha' K alpha`` over the simplex.

    Accelerated projected gradient with gradient-based restarts. Stops once
    the Frank-Wolfe gap (an upper bound on suboptimality) drops below ``tol``.
    Returns ``(alpha, value, gap, iterations)``.
    """
    alpha = project_simplex(alpha0)
    y = alpha.copy()
    t = 1.0
    gap = np.inf
    it = 0
    for it in range(max_iter):
        grad_y = a - inv_L * np.dot(K, y)
        alpha_new = project_simplex(y + step * grad_y)
        if np.dot(y - alpha_new, alpha_new - alpha) > 0.0:
            t = 1.0
            y = alpha_new.copy()
        else:
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = alpha_new + ((t - 1.0) / t_new) * (alpha_new - alpha)
            t = t_new
        alpha = alpha_new
        grad = a - inv_L * np.dot(K, alpha)
        gap = np.max(grad) - np.dot(grad, alpha)
        if gap <= tol:
            break
    Ka = np.dot(K, alpha)
    value = np.dot(a, alpha) - 0.5 * inv_L * np.dot(alpha, Ka)
    return alpha, value, gap, it + 1


@optional_njit()
def _pairwise_q_jit(xp, fp, g):
    n = fp.shape[0]
    cross = np.dot(xp, g.T)
    Q = np.empty((n, n))
    own = np.empty(n)
    for j in range(n):
        own[j] = np.dot(g[j], xp[j])
    for i in range(n):
        for j in range(n):
            Q[i, j] = fp[i] - fp[j] - cross[i, j] + own[j]
    return Q


def _pairwise_q_numpy(xp, fp, g):
    cross = xp @ g.T
    own = np.einsum("jk,jk->j", g, xp)
    return fp[:, None] - fp[None, :] - cross + own[None, :]


def pairwise_q(xp, fp, g):
    """Matrix of ``Q[i, j] = fp_i - fp_j - <g_j, xp_i - xp_j>``.

    ``xp`` holds the plus-transformed points as rows, ``fp`` the plus values
    and ``g`` the gradients as rows.
    """
    xp = np.asarray(xp, dtype=np.float64)
    # Q is translation invariant; centering limits cancellation.
    xp = np.ascontiguousarray(xp - xp.mean(axis=0))
    fp = np.ascontiguousarray(fp, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    if USE_NUMBA:
        return _pairwise_q_jit(xp, fp, g)
    return _pairwise_q_numpy(xp, fp, g)


pairwise_q_reference = _pairwise_q_numpy
