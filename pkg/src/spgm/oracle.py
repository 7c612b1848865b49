"""Brute-force reference for small SPGM subproblems.

Works on the dual program in the original space: for fixed ``xi > 0`` the
dual asks for the point ``z`` closest to ``x0`` in the polyhedron

    bh - L Z'z <= (f_half^+ - xi) btau,    bq + L G'z <= (f_half^+ - xi) 1,

and the subproblem value is ``min_xi L |z(xi) - x0|^2 / (2 xi)``, a convex
function of ``xi``. The projection is solved exactly by enumerating active
sets (there are at most ``2^(2k)`` of them) and ``xi`` by a logarithmic grid
followed by golden-section search. If the polyhedron is empty for every
``xi > 0`` the subproblem is unbounded. Nothing here shares code with the
conic solver in :mod:`spgm.subqp`.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve


@dataclass(frozen=True)
class OracleResult:
    bounded: bool
    tau: float
    xi: float | None = None
    z: np.ndarray | None = None


class PolyhedronProjector:
    """Exact projection onto ``{z : A z <= b}`` for a fixed ``A`` and varying ``b``.

    Every row subset with full row rank is a candidate active set; the
    candidate satisfying primal feasibility and nonnegative multipliers is
    the projection.
    """

    def __init__(self, A, tol=1e-10):
        self.A = np.asarray(A, dtype=np.float64)
        self.tol = tol
        m, d = self.A.shape
        self.sets = []
        for r in range(1, min(m, d) + 1):
            for S in itertools.combinations(range(m), r):
                idx = list(S)
                AS = self.A[idx]
                M = AS @ AS.T
                ev = np.linalg.eigvalsh(M)
                if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
                    continue
                self.sets.append((idx, AS, cho_factor(M)))

    def __call__(self, x0, b):
        A, tol = self.A, self.tol
        x0 = np.asarray(x0, dtype=np.float64)
        scale = np.maximum(1.0, np.abs(b) + np.linalg.norm(A, axis=1) * np.linalg.norm(x0))
        Ax0 = A @ x0
        if np.all(Ax0 - b <= tol * scale):
            return x0.copy()
        best = None
        for idx, AS, fac in self.sets:
            y = cho_solve(fac, Ax0[idx] - b[idx])
            if np.any(y < -tol * max(1.0, float(np.max(np.abs(y))))):
                continue
            z = x0 - AS.T @ y
            if np.all(A @ z - b <= tol * scale):
                dist = float((z - x0) @ (z - x0))
                if best is None or dist < best[0]:
                    best = (dist, z)
        return None if best is None else best[1]


def project_polyhedron(x0, A, b, tol=1e-10):
    """Closest point to ``x0`` in ``{z : A z <= b}`` or None when empty."""
    return PolyhedronProjector(A, tol)(x0, np.asarray(b, dtype=np.float64))


def _dual_data(X, F, G, L, taus, zs):
    """Raw-vector dual data from the history and SPGM's ``tau_i``, ``z_{i+1}``."""
    X, F, G = (np.asarray(a, dtype=np.float64) for a in (X, F, G))
    x0 = X[0]
    Fp = F - np.einsum("ij,ij->i", G, G) / (2.0 * L)
    Xp = X - G / L
    taus = np.asarray(taus, dtype=np.float64)
    Zc = np.asarray(zs, dtype=np.float64) - x0          # columns z_{i+1} - x0 as rows
    bh = taus * Fp - 0.5 * L * float(x0 @ x0) + 0.5 * L * np.einsum("ij,ij->i", zs, zs)
    bq = Fp - np.einsum("ij,ij->i", G, Xp)
    f_half = float(np.min(Fp))
    return x0, Zc, G / L, bh, bq, f_half, taus


def _constraints(Zc, Gs, bh, bq, f_half, taus, L, xi):
    A = np.vstack([-L * Zc, L * Gs])
    b = np.concatenate([(f_half - xi) * taus - bh, (f_half - xi) - bq])
    return A, b


def brute_force_subproblem(X, F, G, L, taus, zs, grid=60, iters=200,
                           xi_tol=1e-10) -> OracleResult:
    """Value of the subproblem for history rows ``X, F, G`` (indices ``0..n-1``).

    ``taus`` are ``tau_0..tau_{n-1}`` and ``zs`` the points ``z_1..z_n``.
    The subproblem is declared unbounded when the dual is infeasible already
    at ``xi = xi_tol * magnitude``, i.e. when its value would exceed roughly
    ``1 / xi_tol`` times the natural scale.
    """
    x0, Zc, Gs, bh, bq, f_half, taus = _dual_data(X, F, G, L, taus, zs)
    mag = max(1.0, abs(f_half), float(np.max(np.abs(bq))) if bq.size else 0.0)

    proj = PolyhedronProjector(_constraints(Zc, Gs, bh, bq, f_half, taus, L, 0.0)[0])

    def value(xi):
        _, b = _constraints(Zc, Gs, bh, bq, f_half, taus, L, xi)
        z = proj(x0, b)
        if z is None:
            return math.inf, None
        return L * float((z - x0) @ (z - x0)) / (2.0 * xi), z

    # the dual must stay feasible for some xi clearly above round-off
    lo = xi_tol * mag
    if value(lo)[1] is None:
        return OracleResult(False, math.inf)
    # largest feasible xi: feasibility is monotone because the right-hand sides decrease
    hi = lo
    while value(hi * 2.0)[1] is not None:
        hi *= 2.0
        if hi > 1e15 * mag:
            break
    a, bnd = hi, hi * 2.0
    for _ in range(60):
        mid = math.sqrt(a * bnd)
        if value(mid)[1] is not None:
            a = mid
        else:
            bnd = mid
    hi = a
    # grid in log(xi), then golden section on the bracket around the best point
    ts = np.linspace(math.log(lo), math.log(hi), grid)
    vals = [value(math.exp(t))[0] for t in ts]
    k = int(np.argmin(vals))
    left, right = ts[max(k - 1, 0)], ts[min(k + 1, grid - 1)]
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    c = right - phi * (right - left)
    d = left + phi * (right - left)
    fc, fd = value(math.exp(c))[0], value(math.exp(d))[0]
    for _ in range(iters):
        if fc <= fd:
            right, d, fd = d, c, fc
            c = right - phi * (right - left)
            fc = value(math.exp(c))[0]
        else:
            left, c, fc = c, d, fd
            d = left + phi * (right - left)
            fd = value(math.exp(d))[0]
        if right - left < 1e-14:
            break
    cands = [(vals[k], ts[k]), (fc, c), (fd, d), (value(hi)[0], math.log(hi))]
    best_val, best_t = min(v for v in cands if math.isfinite(v[0]))
    xi = math.exp(best_t)
    return OracleResult(True, float(best_val), xi, value(xi)[1])


def random_small_history(seed: int, max_len: int = 3):
    """A short SPGM run on a random smooth instance, stopped after its last subproblem.

    Returns ``(problem, stepper)`` where the stepper has seen ``n <= max_len``
    responses and solved the round-``n`` subproblem. Every tenth seed is a
    one-dimensional quadratic with ``L`` equal to its curvature, where the
    round-2 subproblem is unbounded; other seeds draw a synthetic family
    with ``2 <= d <= 6``.
    """
    from .methods import SPGMStepper
    from .problems import SUITE_FAMILIES, gen_random, make_rng, quadratic_1d

    rng = make_rng(seed)
    if seed % 10 == 9:
        c = float(rng.uniform(0.5, 4.0))
        p = quadratic_1d(curvature=c, L=c, x0=float(rng.uniform(-3.0, 3.0)))
        n = 2
    else:
        fam = SUITE_FAMILIES[int(rng.integers(len(SUITE_FAMILIES)))]
        d = int(rng.integers(2, 7))
        n = int(rng.integers(1, max_len + 1))
        p = gen_random(fam, d, 4 * d, int(rng.integers(2**31)))
    st = SPGMStepper(p.L, p.x0, N=n + 1)
    for _ in range(n):
        f, g = p.evaluate(st.x)
        st.tell(f, g)
        if st.terminal is not None:
            break
    return p, st
