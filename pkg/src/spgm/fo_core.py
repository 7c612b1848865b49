"""First-order data: triples, plus-transforms, interpolation residuals.

A triple ``(x, f, g)`` is one oracle answer. For a smoothness constant ``L``
its plus-transform is the gradient step ``x+ = x - g/L`` together with the
value bound ``f+ = f - |g|^2/(2L)``. A set of triples is interpolable by an
L-smooth convex function iff every pairwise residual

    Q[i, j] = f_i - f_j - <g_j, x_i - x_j> - |g_i - g_j|^2 / (2L)
            = f+_i - f+_j - <g_j, x+_i - x+_j>

is nonnegative.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, NamedTuple, Sequence

import numpy as np

from .kernels import pairwise_q

INTERP_RTOL = 1e-9


def _as_vector(v, name):
    arr = np.atleast_1d(np.asarray(v, dtype=np.float64))
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a vector, got shape {arr.shape}")
    return arr


def _check_L(L):
    if not (np.isfinite(L) and L > 0):
        raise ValueError(f"smoothness constant must be positive and finite, got {L!r}")


@dataclass(frozen=True)
class FirstOrderTriple:
    """One oracle observation: query point, value and gradient."""

    x: np.ndarray
    f: float
    g: np.ndarray

    def __post_init__(self):
        x = _as_vector(self.x, "x")
        g = _as_vector(self.g, "g")
        if x.shape != g.shape:
            raise ValueError(f"x and g dimensions differ: {x.shape} vs {g.shape}")
        f = float(self.f)
        if not (np.isfinite(f) and np.all(np.isfinite(x)) and np.all(np.isfinite(g))):
            raise ValueError("triple entries must be finite")
        x.setflags(write=False)
        g.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "f", f)

    @property
    def dim(self):
        return self.x.shape[0]


@dataclass(frozen=True)
class PlusTransform:
    x_plus: np.ndarray
    f_plus: float


def plus_transform(t: FirstOrderTriple, L: float) -> PlusTransform:
    _check_L(L)
    return PlusTransform(t.x - t.g / L, t.f - float(t.g @ t.g) / (2.0 * L))


def coupling_q(ti: FirstOrderTriple, tj: FirstOrderTriple, L: float) -> float:
    """Interpolation residual ``Q[i, j]`` evaluated in the plus form."""
    if ti.dim != tj.dim:
        raise ValueError(f"dimension mismatch: {ti.dim} vs {tj.dim}")
    pi, pj = plus_transform(ti, L), plus_transform(tj, L)
    return pi.f_plus - pj.f_plus - float(tj.g @ (pi.x_plus - pj.x_plus))


def coupling_q_raw(ti: FirstOrderTriple, tj: FirstOrderTriple, L: float) -> float:
    """``Q[i, j]`` from its defining expression (kept for cross-checks)."""
    if ti.dim != tj.dim:
        raise ValueError(f"dimension mismatch: {ti.dim} vs {tj.dim}")
    _check_L(L)
    dg = ti.g - tj.g
    return ti.f - tj.f - float(tj.g @ (ti.x - tj.x)) - float(dg @ dg) / (2.0 * L)


def stack_triples(triples: Sequence[FirstOrderTriple]):
    """Arrays ``(X, F, G)`` with points and gradients as rows."""
    if len(triples) == 0:
        return np.zeros((0, 0)), np.zeros(0), np.zeros((0, 0))
    X = np.vstack([t.x for t in triples])
    G = np.vstack([t.g for t in triples])
    F = np.array([t.f for t in triples])
    return X, F, G


def q_matrix_arrays(X, F, G, L):
    _check_L(L)
    X = np.asarray(X, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    Xp = X - G / L
    Fp = F - np.einsum("ij,ij->i", G, G) / (2.0 * L)
    return pairwise_q(Xp, Fp, G)


def q_matrix(triples: Sequence[FirstOrderTriple], L: float) -> np.ndarray:
    """All pairwise residuals, ``Q[i, j]`` in row ``i`` column ``j``."""
    X, F, G = stack_triples(triples)
    if len(triples) == 0:
        return np.zeros((0, 0))
    return q_matrix_arrays(X, F, G, L)


def data_scale(X, F, G, L) -> float:
    """Magnitude used to make interpolation tolerances relative."""
    X, F, G = (np.asarray(a, dtype=np.float64) for a in (X, F, G))
    if F.size == 0:
        return 1.0
    return float(max(1.0, np.max(np.abs(F)),
                     np.max(np.einsum("ij,ij->i", G, G)) / L,
                     L * np.max(np.einsum("ij,ij->i", X, X))))


class InterpolationResult(NamedTuple):
    """Outcome of an interpolability test.

    ``i``, ``j`` and ``value`` describe the pair with the smallest residual
    (``None`` for an empty set).
    """

    ok: bool
    i: int | None
    j: int | None
    value: float

    def __bool__(self):
        return self.ok


def is_interpolable(triples: Sequence[FirstOrderTriple], L: float,
                    tol: float | None = None) -> InterpolationResult:
    if tol is not None and tol < 0:
        raise ValueError("tol must be nonnegative")
    if len(triples) == 0:
        return InterpolationResult(True, None, None, 0.0)
    X, F, G = stack_triples(triples)
    if tol is None:
        tol = INTERP_RTOL * data_scale(X, F, G, L)
    Q = q_matrix_arrays(X, F, G, L)
    np.fill_diagonal(Q, 0.0)
    flat = int(np.argmin(Q))
    i, j = divmod(flat, Q.shape[1])
    value = float(Q[i, j])
    return InterpolationResult(value >= -tol, i, j, value)


class History:
    """Ordered interpolable set of triples together with ``L``.

    Histories are immutable; :meth:`append` returns a new instance.
    """

    __slots__ = ("L", "triples")

    def __init__(self, L: float, triples: Sequence[FirstOrderTriple] = (),
                 validate: bool = True, tol: float | None = None):
        _check_L(L)
        triples = tuple(triples)
        if triples:
            d = triples[0].dim
            if any(t.dim != d for t in triples):
                raise ValueError("all triples in a history must share a dimension")
        if validate:
            res = is_interpolable(triples, L, tol)
            if not res.ok:
                raise ValueError(
                    f"history is not interpolable: Q[{res.i},{res.j}] = {res.value:.3e}")
        object.__setattr__(self, "L", float(L))
        object.__setattr__(self, "triples", triples)

    def __setattr__(self, name, value):
        raise AttributeError("History is immutable")

    def __copy__(self):
        return self

    def __deepcopy__(self, memo):
        return self

    def __len__(self):
        return len(self.triples)

    def __getitem__(self, i):
        return self.triples[i]

    def __iter__(self):
        return iter(self.triples)

    @property
    def dim(self):
        return self.triples[0].dim if self.triples else None

    def append(self, t: FirstOrderTriple, validate: bool = False) -> "History":
        return History(self.L, self.triples + (t,), validate=validate)

    def arrays(self):
        return stack_triples(self.triples)

    def plus(self):
        """Plus-transformed points (rows) and values."""
        X, F, G = self.arrays()
        return X - G / self.L, F - np.einsum("ij,ij->i", G, G) / (2.0 * self.L)


@dataclass(frozen=True)
class AuxCertificate:
    """Auxiliary vector ``z`` certifying a rate (or pre-rate) ``tau``."""

    z: np.ndarray
    tau: float
    kind: Literal["pre-rate", "rate"] = "pre-rate"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.kind not in ("pre-rate", "rate"):
            raise ValueError(f"unknown certificate kind {self.kind!r}")
        object.__setattr__(self, "z", _as_vector(self.z, "z"))


def aux_residual(cert: AuxCertificate, x0, x_star, f_star: float, target: float,
                 L: float) -> float:
    """``tau (f* - target) + L/2 |x0 - x*|^2 - L/2 |z - x*|^2``.

    ``target`` is the plus value ``f(x)+`` for a pre-rate certificate and the
    plain value ``f(x)`` for a rate certificate. The certificate holds iff the
    result is nonnegative.
    """
    _check_L(L)
    x0 = _as_vector(x0, "x0")
    x_star = _as_vector(x_star, "x_star")
    r0 = x0 - x_star
    rz = cert.z - x_star
    return float(cert.tau * (f_star - target) + 0.5 * L * (r0 @ r0) - 0.5 * L * (rz @ rz))
