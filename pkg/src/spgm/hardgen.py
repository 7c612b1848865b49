"""Adversarial continuation of an SPGM history.

Given the first ``n`` oracle responses seen by SPGM and the optimal
solution of its round-``n`` subproblem, :func:`build_hard_instance` extends
the data to indices ``n..N`` and a minimizer ``star`` so that the smooth
convex function

    f_hard(y) = max_{alpha in simplex} sum_i alpha_i (f_i^+ + <g_i, y - x_i^+>)
                - |sum_i alpha_i g_i|^2 / (2L)

interpolates every triple, reveals one new gradient direction per query
(zero-chain) and leaves every gradient-span method with a final gap of at
least ``L |x0 - x*|^2 / (2 tau_{n,N})``.

Index convention: arrays hold rows ``0..N`` followed by the star point.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .fo_core import FirstOrderTriple, History, data_scale, q_matrix_arrays
from .kernels import simplex_qp_apg
from .methods import SPGMStepper, delta_increment
from .subqp import SubproblemStatus


class HardgenError(RuntimeError):
    """The construction or an evaluation of the hard function failed."""


class BoundViolation(AssertionError):
    """A method beat the lower bound; indicates a bug or a span violation."""


@dataclass(frozen=True)
class SwitchState:
    """SPGM quantities at the switch round ``n`` (after ``n`` responses)."""
    taus: tuple                 # tau_0 .. tau_{n-1}
    tau_half: float
    z_half: np.ndarray
    xi_star: float
    half_index: int

    @property
    def n(self):
        return len(self.taus)


def switch_state(stepper: SPGMStepper) -> tuple[History, SwitchState]:
    """History and round-``n`` quantities of a stepper that has seen ``n >= 1`` responses."""
    n = stepper.n
    if n < 1 or not stepper.rounds:
        raise ValueError("the stepper has not solved a subproblem yet")
    if stepper.terminal is not None:
        raise ValueError("the run terminated early; the subproblem was unbounded")
    if len(stepper.history) != n:
        raise ValueError("the stepper did not keep its history")
    if stepper.memory is not None and stepper.memory < n:
        raise ValueError("the memory window does not cover the whole history")
    info = stepper.rounds[-1]
    if info.n != n or info.status is not SubproblemStatus.OPTIMAL:
        raise ValueError(f"round {n} subproblem is not bounded and solved (status {info.status})")
    if info.tau_half != info.solution.tau:
        raise ValueError(f"round {n} subproblem value was clamped")
    dz = info.z_half - stepper.x0
    xi = stepper.L * float(dz @ dz) / (2.0 * info.tau_half)
    state = SwitchState(tuple(stepper.taus[:n]), float(info.tau_half), np.array(info.z_half),
                        xi, int(info.half_index))
    return stepper.history, state


@dataclass(frozen=True)
class HardInstance:
    L: float
    d: int
    n: int
    N: int
    X: np.ndarray               # (N+2, d) query points, star last
    F: np.ndarray
    G: np.ndarray
    Delta: float
    xi_star: float
    f_star: float
    x_star: np.ndarray
    etas: np.ndarray            # eta_n .. eta_N
    deltas: np.ndarray          # delta_n .. delta_N
    taus: np.ndarray            # tau_{n,n} .. tau_{n,N}
    tau_half: float
    half_index: int
    z_half: np.ndarray
    orthobasis: np.ndarray      # (d, N-n+1)
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def x0(self):
        return self.X[0]

    @property
    def star(self):
        return self.N + 1

    @property
    def size(self):
        return self.N + 2

    def triples(self):
        return [FirstOrderTriple(self.X[i], float(self.F[i]), self.G[i]) for i in range(self.size)]

    def plus(self):
        Xp = self.X - self.G / self.L
        Fp = self.F - np.einsum("ij,ij->i", self.G, self.G) / (2.0 * self.L)
        return Xp, Fp

    def scale(self):
        """Translation-invariant magnitude of the data (``Q`` ignores shifts in x and f)."""
        return data_scale(self.X - self.x0, self.F - self.f_star, self.G, self.L)

    def bound(self):
        """``L |x0 - x*|^2 / (2 tau_{n,N})``."""
        r = self.x0 - self.x_star
        return self.L * float(r @ r) / (2.0 * self.taus[-1])

    def evaluate(self, y):
        return eval_hard(self, y)

    # -- serialization
    def to_record(self) -> dict:
        rec = {"kind": "hard_instance"}
        for k in ("L", "d", "n", "N", "Delta", "xi_star", "f_star", "tau_half", "half_index"):
            rec[k] = getattr(self, k)
        for k in ("X", "F", "G", "x_star", "etas", "deltas", "taus", "z_half", "orthobasis"):
            rec[k] = np.asarray(getattr(self, k)).tolist()
        rec["meta"] = self.meta
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "HardInstance":
        if rec.get("kind") != "hard_instance":
            raise ValueError("not a hard instance record")
        kw = {k: rec[k] for k in ("L", "Delta", "xi_star", "f_star", "tau_half")}
        kw.update({k: int(rec[k]) for k in ("d", "n", "N", "half_index")})
        for k in ("X", "F", "G", "x_star", "etas", "deltas", "taus", "z_half", "orthobasis"):
            kw[k] = _frozen(np.array(rec[k], dtype=np.float64))
        if kw["orthobasis"].ndim == 1:
            kw["orthobasis"] = kw["orthobasis"].reshape(kw["d"], -1)
        return cls(meta=dict(rec.get("meta", {})), **kw)

    def dumps(self) -> str:
        return json.dumps(self.to_record())

    @classmethod
    def loads(cls, text: str) -> "HardInstance":
        return cls.from_record(json.loads(text))


def _frozen(a):
    a.setflags(write=False)
    return a


def _orthobasis(Gh, d, count, seed):
    """Orthonormal columns spanning part of the complement of ``range(Gh')``."""
    rng = np.random.Generator(np.random.Philox(seed))
    if Gh.shape[0]:
        U, s, _ = np.linalg.svd(Gh.T, full_matrices=False)
        rank = int(np.sum(s > 1e-12 * max(s[0], 1e-300)))
        U = U[:, :rank]
    else:
        U = np.zeros((d, 0))
    if U.shape[1] + count > d:
        raise ValueError(f"dimension {d} too small: history spans {U.shape[1]} directions "
                         f"and {count} new ones are needed")
    R = rng.standard_normal((d, count))
    for _ in range(2):  # project twice for orthogonality to round-off
        R -= U @ (U.T @ R)
    Qr, _ = np.linalg.qr(R)
    for _ in range(2):
        Qr -= U @ (U.T @ Qr)
        Qr, _ = np.linalg.qr(Qr)
    return Qr


def build_hard_instance(history: History, state: SwitchState, N: int, d: int | None = None,
                        seed: int = 0) -> HardInstance:
    """Extend ``history`` (``n`` responses) to the hard instance for budget ``N``."""
    n = len(history)
    if state.n != n:
        raise ValueError(f"state is for round {state.n} but the history has {n} responses")
    if not 1 <= n <= N:
        raise ValueError("need 1 <= n <= N (the n = 0 construction is not supported)")
    L = history.L
    Xh, Fh, Gh = history.arrays()
    dh = Xh.shape[1]
    d = max(dh, N + 2) if d is None else int(d)
    if d < N + 2:
        raise ValueError(f"need d >= N + 2 = {N + 2}, got {d}")
    if d < dh:
        raise ValueError(f"d = {d} is smaller than the history dimension {dh}")

    def embed(v):
        out = np.zeros(d)
        out[:dh] = v
        return out

    x0 = embed(Xh[0])
    Gh_e = np.array([embed(g) for g in Gh])
    Xh_e = np.array([embed(x) for x in Xh])
    z_half = embed(state.z_half)
    Delta = float((z_half - x0) @ (z_half - x0))
    if Delta <= 1e-12 * max(1.0, float(x0 @ x0)):
        raise HardgenError(f"degenerate construction: |z_half - x0|^2 = {Delta:.3e}")

    tau_half = state.tau_half
    m = N - n + 1
    taus = np.empty(m)
    deltas = np.empty(m)
    etas = np.empty(m)
    deltas[0] = delta_increment(tau_half, n == N)
    taus[0] = tau_half + deltas[0]
    etas[0] = 1.0 / (2.0 * tau_half * deltas[0])
    acc = deltas[0] ** 2 * etas[0]
    for k in range(1, m):
        i = n + k
        deltas[k] = delta_increment(taus[k - 1], i == N)
        taus[k] = taus[k - 1] + deltas[k]
        etas[k] = (1.0 + acc) / (2.0 * taus[k - 1] * deltas[k])
        acc += deltas[k] ** 2 * etas[k]

    basis = _orthobasis(Gh_e, d, m, seed)
    G_new = (np.sqrt(etas * L * L * Delta)[None, :] * basis).T

    Fh_plus = Fh - np.einsum("ij,ij->i", Gh, Gh) / (2.0 * L)
    hi = state.half_index
    x_half_plus = Xh_e[hi] - Gh_e[hi] / L
    f_half_plus = float(Fh_plus[hi])
    f_star = f_half_plus - state.xi_star

    X_new = np.empty((m, d))
    z = z_half
    prev_plus, prev_tau = x_half_plus, tau_half
    for k in range(m):
        X_new[k] = (prev_tau / taus[k]) * prev_plus + (deltas[k] / taus[k]) * z
        z = z - deltas[k] * G_new[k] / L
        prev_plus, prev_tau = X_new[k] - G_new[k] / L, taus[k]
    x_star = z
    F_new = f_star + 0.5 * L * Delta * (2.0 * deltas - 1.0) * etas

    X = np.vstack([Xh_e, X_new, x_star[None, :]])
    F = np.concatenate([Fh, F_new, [f_star]])
    G = np.vstack([Gh_e, G_new, np.zeros((1, d))])
    arr = [_frozen(a) for a in (X, F, G, x_star, etas, deltas, taus, z_half, basis)]
    return HardInstance(L, d, n, N, arr[0], arr[1], arr[2], Delta, float(state.xi_star),
                        float(f_star), arr[3], arr[4], arr[5], arr[6], float(tau_half), hi,
                        arr[7], arr[8], meta={"seed": seed})


# ------------------------------------------------------------------ evaluation

def _kkt_polish(a, K, inv_L, alpha, tol):
    """Active-set refinement of a simplex QP solution; returns the best point seen."""
    def fw_gap(al):
        gr = a - inv_L * (K @ al)
        return float(np.max(gr) - gr @ al)

    best, best_gap = alpha, fw_gap(alpha)
    S = set(np.flatnonzero(alpha > 1e-12).tolist())
    for _ in range(2 * a.size + 2):
        if best_gap <= tol or not S:
            break
        idx = np.array(sorted(S))
        s = idx.size
        M = np.zeros((s + 1, s + 1))
        M[:s, :s] = inv_L * K[np.ix_(idx, idx)]
        M[:s, s] = 1.0
        M[s, :s] = 1.0
        rhs = np.concatenate([a[idx], [1.0]])
        sol = np.linalg.lstsq(M, rhs, rcond=None)[0]
        al = np.zeros_like(alpha)
        al[idx] = sol[:s]
        if np.any(al < 0.0):
            S.discard(int(idx[np.argmin(sol[:s])]))
            continue
        gap = fw_gap(al)
        if gap < best_gap:
            best, best_gap = al, gap
        gr = a - inv_L * (K @ al)
        j = int(np.argmax(gr))
        if j in S:
            break
        S.add(j)
    return best, best_gap


def eval_hard(inst: HardInstance, y, tol: float | None = None, max_iter: int = 10_000):
    """Value and gradient of the hard function at ``y``.

    The inner simplex maximization is solved to Frank-Wolfe gap below
    ``tol`` and then refined on its active set; the gradient is
    ``sum_i alpha_i g_i``. The default tolerance,
    ``min(1e-10 * scale, 1e-8 * bound)``, keeps the value error well below
    the lower bound even when the bound is tiny next to the data. Gaps down
    to the rounding noise of the inner data are accepted.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (inst.d,):
        raise ValueError(f"expected a point of dimension {inst.d}")
    L = inst.L
    Xp, Fp = inst.plus()
    G = inst.G
    a = Fp + G @ y - np.einsum("ij,ij->i", G, Xp)
    K = G @ G.T
    if tol is None:
        tol = min(1e-10 * inst.scale(), 1e-8 * inst.bound())
    noise = 128.0 * np.finfo(np.float64).eps * max(float(np.max(np.abs(a))), 1e-300)
    lam = float(np.linalg.eigvalsh(K)[-1]) / L
    step = 1.0 / lam if lam > 0 else 1.0
    alpha0 = np.zeros(a.size)
    alpha0[int(np.argmax(a))] = 1.0
    alpha, _, gap, _ = simplex_qp_apg(a, K, 1.0 / L, alpha0, step, max_iter, tol)
    if gap > noise:
        # the gradient error only shrinks like sqrt(gap): finish on the active set
        alpha, gap = _kkt_polish(a, K, 1.0 / L, alpha, noise)
    if gap > max(tol, noise):
        raise HardgenError(f"inner maximization stalled with gap {gap:.3e} > {tol:.3e}")
    g = G.T @ alpha
    f = float(a @ alpha - 0.5 / L * (g @ g))
    return f, g


# ------------------------------------------------------------------ verification

CASES = {
    1: "history / history",
    2: "history / new",
    3: "history / star",
    4: "new / history",
    5: "new / later new",
    6: "new / earlier new",
    7: "new / star",
    8: "star / history",
    9: "star / new",
}


@dataclass
class CheckReport:
    """Worst residual per named check; a check passes when its residual is ``>= -tol``."""
    title: str
    tol: float
    worst: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def add(self, name, value):
        value = float(value)
        self.worst[name] = min(self.worst.get(name, math.inf), value)

    @property
    def ok(self):
        return all(v >= -self.tol for v in self.worst.values())

    def failures(self):
        return {k: v for k, v in self.worst.items() if v < -self.tol}

    def lines(self):
        out = [f"{self.title}: {'PASS' if self.ok else 'FAIL'} (tol {self.tol:.1e})"]
        for k, v in self.worst.items():
            out.append(f"  {k:<40s} {v: .3e}")
        out.extend(f"  note: {s}" for s in self.notes)
        return out


def _case(inst, i, j):
    n, star = inst.n, inst.star
    bi = 0 if i < n else (1 if i != star else 2)
    bj = 0 if j < n else (1 if j != star else 2)
    table = [[1, 2, 3], [4, None, 7], [8, 9, None]]
    c = table[bi][bj]
    if c is None and bi == 1:
        c = 5 if i < j else 6
    return c


def q_full(inst: HardInstance) -> np.ndarray:
    return q_matrix_arrays(inst.X - inst.x0, inst.F - inst.f_star, inst.G, inst.L)


def verify_interpolation(inst: HardInstance, tol: float = 1e-8) -> CheckReport:
    """Smallest ``Q_{i,j}`` per case category, relative to ``inst.scale()``."""
    Q = q_full(inst) / inst.scale()
    rep = CheckReport("interpolation", tol)
    size = inst.size
    for i in range(size):
        for j in range(size):
            if i == j:
                continue
            c = _case(inst, i, j)
            if c is None:
                continue
            rep.add(f"case {c}: {CASES[c]}", Q[i, j])
    c9 = [abs(Q[inst.star, j]) for j in range(inst.n, inst.N + 1)]
    rep.notes.append(f"case 9 max |Q| = {max(c9):.3e} (zero in exact arithmetic)")
    return rep


def verify_zero_chain(inst: HardInstance, tol: float = 1e-8) -> CheckReport:
    """The three sufficient conditions for the zero-chain property."""
    n, N, L = inst.n, inst.N, inst.L
    scale = inst.scale()
    G, X = inst.G, inst.X
    Q = q_full(inst)
    GG = G @ G.T
    gscale = max(float(np.max(np.diag(GG))), 1e-300)
    rep = CheckReport("zero-chain", tol)
    for j in range(n, N):
        for i in range(j):
            for ell in range(j + 1, N + 1):
                rep.add("equal inner products", -abs(GG[i, j] - GG[i, ell]) / gscale)
    dx = X[: N + 1] - inst.x0
    for j in range(n, N):
        for ell in range(j + 1, N + 1):
            cross = dx @ (G[ell] - G[j])
            for i in range(N + 1):
                r = (Q[i, ell] - Q[i, j] + cross[i]) / scale
                if i < j:
                    key = "i < j < l"
                elif i == j:
                    key = "i = j < l"
                elif i < ell:
                    key = "j < i < l"
                elif i == ell:
                    key = "j < i = l"
                else:
                    key = "j < l < i"
                rep.add(f"three-point condition ({key})", r)
    for j in range(n, N):
        margin = GG[j, j] - max(GG[j, ell] for ell in range(j + 1, N + 1))
        rep.add("separability margin", margin / gscale if margin <= 0 else 0.0)
    return rep


def verify_etas(inst: HardInstance, rtol: float = 1e-10) -> CheckReport:
    """Bounds and orderings of the ``eta`` constants, as relative slacks."""
    taus, deltas, etas = inst.taus, inst.deltas, inst.etas
    rep = CheckReport("eta identities", rtol)
    for k in range(etas.size):
        lo = 1.0 / (2.0 * taus[k] * (deltas[k] - 1.0))
        hi = 1.0 / (2.0 * inst.tau_half * deltas[k])
        rep.add("lower bound", (etas[k] - lo) / etas[k])
        rep.add("upper bound", (hi - etas[k]) / etas[k])
        rep.add("positivity", 0.0 if etas[k] > 0 else -1.0)
    mono = taus * (deltas - 1.0) * etas
    de = deltas * etas
    dm1 = (deltas - 1.0) * etas
    for k in range(etas.size):
        for l in range(k + 1, etas.size):
            rep.add("tau (delta - 1) eta nondecreasing", (mono[l] - mono[k]) / mono[l])
            rep.add("delta_j eta_j <= (delta_i - 1) eta_i", (dm1[k] - de[l]) / dm1[k])
    return rep


def verify_crossterms(inst: HardInstance, rtol: float = 1e-9) -> CheckReport:
    """``<g_j, x_i^+ - x_j^+>`` against its closed forms for ``j < i``, ``i >= n``."""
    n, N, L = inst.n, inst.N, inst.L
    Xp, _ = inst.plus()
    G = inst.G
    x_half_plus = Xp[inst.half_index]
    rep = CheckReport("cross terms", rtol)
    for i in range(n, N + 1):
        ti = inst.taus[i - n]
        for j in range(i):
            lhs = float(G[j] @ (Xp[i] - Xp[j]))
            if j >= n:
                k = j - n
                rhs = (inst.taus[k] / ti - 1.0) * (inst.deltas[k] - 1.0) * L * inst.etas[k] * inst.Delta
            else:
                rhs = (inst.tau_half / ti) * float(G[j] @ (x_half_plus - inst.z_half)) \
                    + float(G[j] @ (inst.z_half - Xp[j]))
            mag = max(abs(rhs), float(np.linalg.norm(G[j])) * max(
                float(np.linalg.norm(Xp[i] - inst.x0)), float(np.linalg.norm(Xp[j] - inst.x0)),
                float(np.linalg.norm(inst.z_half - inst.x0))), 1e-300)
            rep.add("j >= n" if j >= n else "j < n", -abs(lhs - rhs) / mag)
    return rep


def gap_identity_residual(inst: HardInstance) -> float:
    """Relative error of ``f_N - f* = L |x0 - x*|^2 / (2 tau_{n,N})``."""
    b = inst.bound()
    return abs((inst.F[inst.N] - inst.f_star) - b) / b


def verify_all(inst: HardInstance, tol: float = 1e-8, rtol: float = 1e-10) -> list[CheckReport]:
    gap = CheckReport("gap identity", rtol)
    gap.add("relative error", -gap_identity_residual(inst))
    return [verify_interpolation(inst, tol), verify_zero_chain(inst, tol), verify_etas(inst, rtol),
            verify_crossterms(inst, 1e-9), gap]


# ------------------------------------------------------------------ play against the instance

def span_residual(inst: HardInstance, x, upto: int) -> float:
    """Relative distance of ``x - x0`` from ``span{g_0..g_{upto-1}}``."""
    v = np.asarray(x, dtype=np.float64) - inst.x0
    nv = float(np.linalg.norm(v))
    if nv == 0.0 or upto == 0:
        return nv
    B = inst.G[:upto].T
    coef = np.linalg.lstsq(B, v, rcond=None)[0]
    return float(np.linalg.norm(v - B @ coef)) / nv


def adversary_gap(inst: HardInstance, iterates, span_tol: float = 1e-8) -> float:
    """``f_hard(x_N) - f*`` for iterates ``x_n..x_N`` of a gradient-span method."""
    iterates = [np.asarray(x, dtype=np.float64) for x in iterates]
    if len(iterates) != inst.N - inst.n + 1:
        raise ValueError(f"expected {inst.N - inst.n + 1} iterates x_n..x_N")
    for k, x in enumerate(iterates):
        i = inst.n + k
        r = span_residual(inst, x, i)
        if r > span_tol:
            raise ValueError(f"iterate {i} leaves x0 + span(g_0..g_{i - 1}) (residual {r:.2e})")
    f, _ = eval_hard(inst, iterates[-1])
    gap = f - inst.f_star
    bound = inst.bound()
    if gap < (1.0 - 1e-6) * bound:
        raise BoundViolation(f"final gap {gap:.17g} below the lower bound {bound:.17g}")
    return gap


def _embed(x, d):
    out = np.zeros(d)
    out[: x.size] = x
    return out


def continue_stepper(inst: HardInstance, stepper):
    """Answer the remaining queries of an ask/tell stepper with the hard function.

    The stepper must live in the instance's dimension; :func:`lift_stepper`
    embeds a lower-dimensional one. Returns the queries ``x_n..x_N``.
    """
    queries = []
    while len(queries) < inst.N - inst.n + 1:
        x = np.array(stepper.x)
        queries.append(x)
        f, g = eval_hard(inst, x)
        if len(queries) == inst.N - inst.n + 1:
            break
        stepper.tell(f, g)
        if stepper.terminal is not None:
            # early termination: the method outputs its terminal point from now on
            while len(queries) < inst.N - inst.n + 1:
                queries.append(np.array(stepper.terminal))
    return queries


def lift_stepper(stepper: SPGMStepper, d: int) -> SPGMStepper:
    """The stepper's state embedded in ``R^d`` by zero padding (a copy)."""
    return stepper.embedded(d)


class HardGD:
    """Gradient descent restarted at ``x_n`` with the instance's step ``1/L``."""
    name = "gd"

    def __init__(self, L, x_start):
        self.L = L
        self.x = np.array(x_start, dtype=np.float64)
        self.terminal = None

    def tell(self, f, g):
        self.x = self.x - np.asarray(g) / self.L


def play_continuations(stepper: SPGMStepper, N: int, d: int | None = None, seed: int = 0,
                       methods=("spgm", "ogm", "gd")):
    """Build the hard instance at the stepper's round and continue each method against it.

    Returns ``(inst, {method: (final gap, bound)})``.
    """
    dh = stepper.x0.size
    d = max(dh, N + 2) if d is None else d
    base = lift_stepper(stepper, d)
    hist, state = switch_state(base)
    inst = build_hard_instance(hist, state, N, d, seed)
    if not np.allclose(base.x, inst.X[inst.n], rtol=0, atol=1e-9 * max(1.0, inst.Delta ** 0.5)):
        raise HardgenError("the instance's x_n does not match the stepper's next query")
    out = {}
    for name in methods:
        if name == "spgm":
            st = base.snapshot()
        elif name == "ogm":
            st = base.snapshot()
            st.switch_mode("ogm")
        elif name == "gd":
            st = HardGD(inst.L, base.x)
        else:
            raise ValueError(f"unknown method {name!r}")
        q = continue_stepper(inst, st)
        out[name] = (adversary_gap(inst, q), inst.bound())
    return inst, out
