"""Test problem families, random instances and reference optima.

All families share the data ``A`` (m x d), ``b`` (m) and a start ``x0``:

* ``ls_plain``       ``|Ax - b|^2 / m``
* ``ls_l2``          ``|Ax - b|^2 / m + |x|^2 / 2``
* ``ls_huber_norm``  ``|Ax - b|^2 / m + h(|x|)``
* ``ls_huber_l1``    ``|Ax - b|^2 / m + sum_i h(|x_i|)``
* ``log_sum_exp``    ``log sum_i exp(a_i.x - b_i)``
* ``moreau_max``     Moreau envelope of ``max`` evaluated at ``Ax - b``
* ``logistic_l2``    ``mean_i log(1 + exp(b_i a_i.x)) + |x|^2 / (2m)``
* ``quadratic_1d``   ``|Ax - b|^2 / 2`` (the one-dimensional examples use A = 1)

with the Huber function ``h(r) = H r^2 / 2`` for ``r <= 1`` and
``H r - H / 2`` beyond, ``H = 100``.
"""
from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import expit

from .kernels import moreau_max

log = logging.getLogger(__name__)

HUBER_WEIGHT = 100.0
POWER_RTOL = 1e-6
POWER_MAX_ITER = 10_000
INFLATE = 1.01
INFLATE_UNCONVERGED = 1.10


class Family(str, enum.Enum):
    LS_PLAIN = "ls_plain"
    LS_L2 = "ls_l2"
    LS_HUBER_NORM = "ls_huber_norm"
    LS_HUBER_L1 = "ls_huber_l1"
    LOG_SUM_EXP = "log_sum_exp"
    MOREAU_MAX = "moreau_max"
    LOGISTIC_L2 = "logistic_l2"
    QUADRATIC_1D = "quadratic_1d"

    def __str__(self):
        return self.value


# The six synthetic families of the random benchmark suite.
SUITE_FAMILIES = (Family.LS_PLAIN, Family.LS_L2, Family.LS_HUBER_NORM,
                  Family.LS_HUBER_L1, Family.LOG_SUM_EXP, Family.MOREAU_MAX)


def huber(r, weight=HUBER_WEIGHT):
    r = np.asarray(r, dtype=np.float64)
    return np.where(r <= 1.0, 0.5 * weight * r * r, weight * r - 0.5 * weight)


@dataclass(frozen=True)
class ProblemInstance:
    family: Family
    A: np.ndarray
    b: np.ndarray
    L: float
    x0: np.ndarray
    seed: int | None = None
    name: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        fam = Family(self.family)
        A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        b = np.atleast_1d(np.asarray(self.b, dtype=np.float64))
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=np.float64))
        if A.shape != (b.shape[0], x0.shape[0]):
            raise ValueError(f"inconsistent dimensions: A {A.shape}, b {b.shape}, x0 {x0.shape}")
        if not self.L > 0:
            raise ValueError("L must be positive")
        for arr in (A, b, x0):
            arr.setflags(write=False)
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "L", float(self.L))

    @property
    def d(self):
        return self.A.shape[1]

    @property
    def m(self):
        return self.A.shape[0]

    def evaluate(self, x):
        return evaluate(self, x)

    def with_L(self, L):
        return ProblemInstance(self.family, self.A, self.b, L, self.x0, self.seed, self.name, self.meta)


def evaluate(p: ProblemInstance, x):
    """Exact value and gradient of the instance objective at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (p.d,):
        raise ValueError(f"expected a point of dimension {p.d}, got shape {x.shape}")
    A, b, m = p.A, p.b, p.m
    fam = p.family
    if fam is Family.QUADRATIC_1D:
        r = A @ x - b
        return 0.5 * float(r @ r), A.T @ r
    if fam is Family.LOG_SUM_EXP:
        z = A @ x - b
        zmax = np.max(z)
        e = np.exp(z - zmax)
        s = e.sum()
        return float(zmax + np.log(s)), A.T @ (e / s)
    if fam is Family.MOREAU_MAX:
        val, p_ = moreau_max(np.ascontiguousarray(A @ x - b))
        return float(val), A.T @ p_
    if fam is Family.LOGISTIC_L2:
        u = b * (A @ x)
        f = float(np.mean(np.logaddexp(0.0, u)) + (x @ x) / (2.0 * m))
        g = A.T @ (b * expit(u)) / m + x / m
        return f, g
    r = A @ x - b
    f = float(r @ r) / m
    g = (2.0 / m) * (A.T @ r)
    if fam is Family.LS_PLAIN:
        return f, g
    if fam is Family.LS_L2:
        return f + 0.5 * float(x @ x), g + x
    if fam is Family.LS_HUBER_NORM:
        nx = float(np.linalg.norm(x))
        if nx <= 1.0:
            return f + 0.5 * HUBER_WEIGHT * nx * nx, g + HUBER_WEIGHT * x
        return f + HUBER_WEIGHT * nx - 0.5 * HUBER_WEIGHT, g + HUBER_WEIGHT * x / nx
    if fam is Family.LS_HUBER_L1:
        return f + float(np.sum(huber(np.abs(x)))), g + HUBER_WEIGHT * np.clip(x, -1.0, 1.0)
    raise ValueError(f"unknown family {fam}")  # pragma: no cover


def make_rng(seed):
    """Counter-based, platform independent generator (Philox)."""
    return np.random.Generator(np.random.Philox(seed))


def spectral_norm_sq(A, rtol=POWER_RTOL, max_iter=POWER_MAX_ITER, seed=0):
    """Largest eigenvalue of ``A^T A`` by power iteration.

    Returns ``(estimate, converged)``; the estimate is a Rayleigh quotient and
    hence never exceeds the true value.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.size == 0 or not np.any(A):
        return 0.0, True
    v = make_rng(seed).standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = A.T @ (A @ v)
        lam_new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, True
        v = w / nw
        if abs(lam_new - lam) <= rtol * abs(lam_new):
            return lam_new, True
        lam = lam_new
    return lam, False


def estimate_smoothness(p: ProblemInstance) -> float:
    """Certified-by-construction upper bound on the gradient Lipschitz constant."""
    lam, ok = spectral_norm_sq(p.A)
    if not ok:
        warnings.warn("power iteration did not converge; inflating the bound by 10%",
                      RuntimeWarning, stacklevel=2)
    lam *= INFLATE if ok else INFLATE_UNCONVERGED
    m = p.m
    fam = p.family
    if fam is Family.LS_PLAIN:
        return 2.0 * lam / m
    if fam is Family.LS_L2:
        return 2.0 * lam / m + 1.0
    if fam in (Family.LS_HUBER_NORM, Family.LS_HUBER_L1):
        return 2.0 * lam / m + HUBER_WEIGHT
    if fam in (Family.LOG_SUM_EXP, Family.MOREAU_MAX, Family.QUADRATIC_1D):
        return lam
    if fam is Family.LOGISTIC_L2:
        return lam / (4.0 * m) + 1.0 / m
    raise ValueError(f"unknown family {fam}")  # pragma: no cover


def make_instance(family, A, b, x0, L=None, seed=None, name=""):
    """Assemble an instance, estimating ``L`` when it is not supplied."""
    fam = Family(family)
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    p = ProblemInstance(fam, A, b, 1.0, x0, seed, name)
    if L is None:
        L = estimate_smoothness(p)
        if L <= 0:
            raise ValueError("instance has zero curvature bound; supply L explicitly")
    return p.with_L(L)


def gen_random(family, d: int, m: int, seed: int) -> ProblemInstance:
    """Random instance with standard normal ``A``, ``b`` and ``x0``."""
    if d < 1 or m < 1:
        raise ValueError("d and m must be positive")
    fam = Family(family)
    rng = make_rng(seed)
    A = rng.standard_normal((m, d))
    b = rng.standard_normal(m)
    x0 = rng.standard_normal(d)
    if fam is Family.LOGISTIC_L2:
        b = np.where(b >= 0.0, 1.0, -1.0)
    return make_instance(fam, A, b, x0, seed=seed, name=f"{fam.value}-d{d}-m{m}-s{seed}")


def quadratic_1d(curvature=1.0, L=None, x0=1.0):
    """``curvature * x^2 / 2`` on the real line, declared smoothness ``L``."""
    a = np.sqrt(curvature)
    return make_instance(Family.QUADRATIC_1D, [[a]], [0.0], [x0],
                         L=curvature if L is None else L, name="quadratic")


class Source(str, enum.Enum):
    CLOSED_FORM = "closed_form"
    HIGH_ACCURACY_RUN = "high_accuracy_run"


@dataclass(frozen=True)
class ReferenceOptimum:
    x_star: np.ndarray
    f_star: float
    source: Source
    grad_norm: float = 0.0

    def scale(self, p: ProblemInstance) -> float:
        """``L |x0 - x*|^2 / 2``, the normalizer of suboptimality."""
        r = p.x0 - self.x_star
        return 0.5 * p.L * float(r @ r)

    def gap_norm(self, p: ProblemInstance, f: float) -> float:
        s = self.scale(p)
        return (f - self.f_star) / s if s > 0 else 0.0


def _closest_lstsq_minimizer(H, rhs, x0):
    # minimizer of the quadratic closest to x0 (the set is affine when H is singular)
    dx, *_ = np.linalg.lstsq(H, rhs - H @ x0, rcond=None)
    return x0 + dx


def _closed_form(p: ProblemInstance):
    A, b, m, d = p.A, p.b, p.m, p.d
    fam = p.family
    if fam is Family.QUADRATIC_1D:
        return _closest_lstsq_minimizer(A.T @ A, A.T @ b, p.x0)
    if fam is Family.LS_PLAIN:
        return _closest_lstsq_minimizer((2.0 / m) * (A.T @ A), (2.0 / m) * (A.T @ b), p.x0)
    base = (2.0 / m) * (A.T @ A)
    rhs = (2.0 / m) * (A.T @ b)
    if fam is Family.LS_L2:
        return np.linalg.solve(base + np.eye(d), rhs)
    if fam in (Family.LS_HUBER_NORM, Family.LS_HUBER_L1):
        # valid only if the minimizer sits where the Huber term is quadratic
        x = np.linalg.solve(base + HUBER_WEIGHT * np.eye(d), rhs)
        inside = np.linalg.norm(x) <= 1.0 if fam is Family.LS_HUBER_NORM else np.all(np.abs(x) <= 1.0)
        return x if inside else None
    return None


def _polish(p: ProblemInstance, x, gtol):
    best_x, (best_f, g) = x, p.evaluate(x)
    for method in ("BFGS", "L-BFGS-B"):
        try:
            res = optimize.minimize(p.evaluate, best_x, jac=True, method=method,
                                    options={"gtol": gtol, "maxiter": 20_000})
        except (ValueError, FloatingPointError):  # pragma: no cover
            continue
        f_new, g_new = p.evaluate(res.x)
        if f_new < best_f or (f_new == best_f and np.linalg.norm(g_new) < np.linalg.norm(g)):
            best_x, best_f, g = res.x, f_new, g_new
    return best_x, best_f, g


def reference_optimum(p: ProblemInstance, budget: int = 100, use_spgm: bool = True) -> ReferenceOptimum:
    """High-accuracy minimizer used as the baseline for normalized gaps.

    Closed forms cover the quadratic families (and the Huber families when
    the minimizer lies in the quadratic region). Otherwise long OGM and
    limited-memory SPGM runs (ten times ``budget``) are compared, followed
    by a quasi-Newton polish; the lowest value found wins.
    """
    try:
        x = _closed_form(p)
    except np.linalg.LinAlgError:
        x = None
    if x is not None:
        f, g = p.evaluate(x)
        gn = float(np.linalg.norm(g))
        if gn <= 1e-8 * max(1.0, p.L * float(np.linalg.norm(p.x0 - x))):
            return ReferenceOptimum(x, f, Source.CLOSED_FORM, gn)
        log.info("closed form for %s rejected (|g| = %.2e)", p.name, gn)

    from .methods import run_k_spgm, run_ogm

    long_n = 10 * budget
    candidates = []
    tr = run_ogm(p, N=long_n, keep_iterates=False)
    candidates.append(tr.final_x)
    if use_spgm:
        # inexact late subproblems only cost accuracy here; the polish follows
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            tr = run_k_spgm(p, N=long_n, k=10, keep_iterates=False, on_solver_failure="warn")
        if caught:
            log.info("%d solver warnings during the reference run for %s", len(caught), p.name)
        candidates.append(tr.final_x)
    best = min(candidates, key=lambda z: p.evaluate(z)[0])
    x, f, g = _polish(p, best, gtol=1e-13)
    gn = float(np.linalg.norm(g))
    scale = max(1.0, p.L * float(np.linalg.norm(p.x0 - x)))
    if gn > 1e-8 * scale:
        log.warning("reference optimum for %s has |g| = %.2e", p.name, gn)
    return ReferenceOptimum(x, f, Source.HIGH_ACCURACY_RUN, gn)
