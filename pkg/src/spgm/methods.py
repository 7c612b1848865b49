"""Gradient descent, OGM, SPGM and limited-memory SPGM.

Each method is an ask/tell stepper: ``x`` is the next query point and
``tell(f, g)`` reveals the oracle response there. The ``run_*`` drivers
connect a stepper to an oracle and collect a :class:`RunTrace`.
"""
from __future__ import annotations

import copy
import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .fo_core import FirstOrderTriple, History
from .subqp import (GramMemory, SolverOptions, SubproblemError, SubproblemStatus,
                    recover_dual, solve)

log = logging.getLogger(__name__)


def delta_increment(tau: float, is_final: bool = False) -> float:
    """``1 + sqrt(1 + 2 tau)``, or ``(1 + sqrt(1 + 4 tau)) / 2`` at the last step."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if is_final:
        return 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tau))
    return 1.0 + math.sqrt(1.0 + 2.0 * tau)


def tau_forecast(tau_n: float, n: int, N: int) -> np.ndarray:
    """Forecast ``tau_{n,n}, ..., tau_{n,N}`` starting from ``tau_{n,n} = tau_n``."""
    if not 0 <= n <= N:
        raise ValueError("need 0 <= n <= N")
    out = np.empty(N - n + 1)
    out[0] = tau_n
    for j, i in enumerate(range(n + 1, N + 1), start=1):
        out[j] = out[j - 1] + delta_increment(out[j - 1], i == N)
    return out


def ogm_tau(N: int) -> float:
    """``tau_{0,N}``, the rate OGM guarantees with budget ``N``."""
    return float(tau_forecast(2.0, 0, N)[-1])


@dataclass
class RoundInfo:
    """What SPGM computed at iteration ``n`` before querying ``x_n``."""
    n: int
    half_index: int
    x_half: np.ndarray
    f_half_plus: float
    tau_half: float
    z_half: np.ndarray | None
    status: SubproblemStatus | None
    xi: float | None = None
    solution: object = None


class GradientDescent:
    name = "gd"

    def __init__(self, L, x0, N):
        if N < 1:
            raise ValueError("N must be at least 1")
        self.L, self.N = float(L), int(N)
        self.x = np.array(x0, dtype=np.float64)
        self.n = 0  # responses received
        self.tau = float("nan")
        self.status = None

    @property
    def done(self):
        return self.n > self.N

    @property
    def terminal(self):
        return None

    def tell(self, f, g):
        if self.done:
            raise RuntimeError("budget exhausted")
        self.n += 1
        if self.n <= self.N:
            self.x = self.x - np.asarray(g, dtype=np.float64) / self.L

    def bound_inv(self):
        return float("nan")


class SPGMStepper:
    """SPGM and its relatives driven one oracle response at a time.

    ``mode="spgm"`` solves the subproblem every iteration; ``memory=k``
    restricts it to the last ``k`` indices. ``mode="ogm"`` skips the
    subproblem (``tau_{n-1/2} = tau_{n-1}``, ``z_{n+1/2} = z_n``,
    ``x_{n-1/2} = x_{n-1}``), which is exactly OGM.
    """
    name = "spgm"

    def __init__(self, L, x0, N, memory=None, mode="spgm", solver_opts=None,
                 keep_history=True, on_solver_failure="warn", check_feasible=True):
        if N < 1:
            raise ValueError("N must be at least 1")
        if memory is not None and memory < 1:
            raise ValueError("memory must be at least 1")
        if mode not in ("spgm", "ogm"):
            raise ValueError(f"unknown mode {mode!r}")
        if on_solver_failure not in ("raise", "warn"):
            raise ValueError("on_solver_failure must be 'raise' or 'warn'")
        self.L = float(L)
        self.N = int(N)
        self.x0 = np.array(x0, dtype=np.float64)
        self.mode = mode
        self.memory = memory
        self.solver_opts = solver_opts or SolverOptions()
        self.on_solver_failure = on_solver_failure
        self.check_feasible = check_feasible
        self.keep_history = keep_history
        self.x = self.x0.copy()
        self.n = 0                     # responses received
        self.taus = []                 # tau_0, tau_1, ...
        self.zs = []                   # z_1, z_2, ...
        self.rounds = []               # RoundInfo for n = 1, 2, ...
        self.history = History(self.L, (), validate=False)
        self.mem = GramMemory(self.x0, self.L, memory)
        self.terminal = None           # output point after early termination
        self._pending = None           # (z_half, delta) awaiting g_n
        self._last = None              # (x, f, g) of the latest response
        self._mem_complete = True      # every response so far is in the Gram memory

    # -- public state
    @property
    def done(self):
        return self.n > self.N or (self.terminal is not None and self.n >= 1)

    @property
    def tau(self):
        return self.taus[-1] if self.taus else float("nan")

    @property
    def status(self):
        if not self.rounds:
            return None
        return self.rounds[-1].status

    def bound_inv(self):
        """``1 / tau_{n,N}`` for the latest iterate (0 after early termination)."""
        if self.terminal is not None:
            return 0.0
        if not self.taus:
            return float("nan")
        n = len(self.taus) - 1
        return 1.0 / float(tau_forecast(self.taus[-1], n, self.N)[-1])

    def forecast(self):
        n = len(self.taus) - 1
        return tau_forecast(self.taus[-1], n, self.N)

    # -- protocol
    def tell(self, f, g):
        if self.n > self.N:
            raise RuntimeError("budget exhausted")
        if self.terminal is not None:
            raise RuntimeError("method already terminated")
        f = float(f)
        g = np.array(g, dtype=np.float64)
        x = self.x
        i = self.n
        L = self.L
        if self.keep_history:
            self.history = self.history.append(FirstOrderTriple(x.copy(), f, g.copy()))
        if i == 0:
            tau_i = 2.0
            z_next = self.x0 - 2.0 * g / L
            self.taus.append(tau_i)
        else:
            z_half, delta = self._pending
            tau_i = self.taus[-1]
            z_next = z_half - delta * g / L
        self.zs.append(z_next)
        if self.mode != "ogm":
            self.mem.push(i, x, f, g, tau_i, z_next)
        else:
            self._mem_complete = False
        self._last = (x, f, g)
        self.n += 1
        if self.n <= self.N:
            self._advance()

    def _advance(self):
        n = self.n
        L = self.L
        final = n == self.N
        tau_prev = self.taus[-1]
        if self.mode == "ogm":
            x_prev, f_prev, g_prev = self._last
            info = RoundInfo(n, n - 1, x_prev, f_prev - float(g_prev @ g_prev) / (2 * L),
                             tau_prev, self.zs[-1], None)
            tau_half, z_half, x_half_plus = tau_prev, self.zs[-1], x_prev - g_prev / L
        else:
            info, x_half_plus = self._solve_round(n, tau_prev)
            if info.status is SubproblemStatus.UNBOUNDED:
                self.rounds.append(info)
                self.terminal = x_half_plus
                self.x = x_half_plus
                return
            tau_half, z_half = info.tau_half, info.z_half
        self.rounds.append(info)
        delta = delta_increment(tau_half, final)
        tau_n = tau_half + delta
        a, b = tau_half / tau_n, delta / tau_n
        # the limited-memory form writes the first weight as 1 - tau_half / tau_n
        assert abs((1.0 - a) - b) <= 1e-12 * max(1.0, b)
        self.x = a * x_half_plus + b * z_half
        self._pending = (z_half, delta)
        self.taus.append(float(tau_n))

    def _solve_round(self, n, tau_prev):
        mem = self.mem
        data = mem.data()
        pos = mem.half_position()
        half = int(mem.idx[pos])
        x_half = mem.X[pos]
        x_half_plus = x_half - mem.G[:, pos]
        if self.check_feasible:
            from .subqp import _known_feasible
            w0 = _known_feasible(data)
            h0 = data.constraint(w0)
            if h0 > 1e-8 * data.scale():
                raise AssertionError(f"known feasible point violates the constraint by {h0:.3e}")
        try:
            sol = solve(data, self.solver_opts)
        except Exception as exc:  # engine crash: nothing usable
            raise SubproblemError(f"subproblem at iteration {n} failed: {exc}") from exc
        if sol.status is SubproblemStatus.UNBOUNDED:
            return RoundInfo(n, half, x_half, data.f_half_plus, float("inf"), None,
                             sol.status, solution=sol), x_half_plus
        usable = np.isfinite(sol.tau) and sol.z is not None and np.all(np.isfinite(sol.z))
        if not usable:
            raise SubproblemError(f"subproblem at iteration {n} returned no usable point "
                                  f"(residuals {sol.residuals})")
        if sol.status is SubproblemStatus.INFEASIBLE_NUMERICAL:
            msg = (f"subproblem at iteration {n} did not converge "
                   f"(residuals {sol.residuals}); continuing from a feasible point "
                   f"with value {sol.tau:.6g}")
            if self.on_solver_failure == "raise":
                raise SubproblemError(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=3)
        tau_half, z_half = sol.tau, sol.z
        if tau_half < tau_prev:
            if tau_half < tau_prev - 1e-8 * max(1.0, tau_prev):
                warnings.warn(f"subproblem value {tau_half:.17g} below tau_{n-1} = {tau_prev:.17g};"
                              " clamping", RuntimeWarning, stacklevel=3)
            tau_half, z_half = tau_prev, self.zs[-1]
        xi = None
        if sol.status is SubproblemStatus.OPTIMAL and sol.tau > 0:
            xi = recover_dual(sol, data).xi
        return RoundInfo(n, half, x_half, data.f_half_plus, tau_half, z_half, sol.status,
                         xi=xi, solution=sol), x_half_plus

    def snapshot(self):
        return copy.deepcopy(self)

    def embedded(self, d: int) -> "SPGMStepper":
        """Copy of the stepper with every vector zero-padded to dimension ``d``.

        Inner products are unchanged, so the copy continues exactly as the
        original would in the larger space; nothing is re-solved.
        """
        d0 = self.x0.size
        if d < d0:
            raise ValueError(f"cannot embed dimension {d0} into {d}")
        new = copy.deepcopy(self)
        if d == d0:
            return new

        def pad(v):
            if v is None:
                return None
            out = np.zeros(d)
            out[:d0] = v
            return out

        new.x0, new.x, new.terminal = pad(self.x0), pad(self.x), pad(self.terminal)
        new.zs = [pad(z) for z in self.zs]
        for r in new.rounds:
            r.x_half, r.z_half = pad(r.x_half), pad(r.z_half)
            if r.solution is not None and r.solution.z is not None:
                r.solution.z = pad(r.solution.z)
        new.history = History(self.L, [FirstOrderTriple(pad(t.x), t.f, pad(t.g)) for t in self.history],
                              validate=False)
        if self._pending is not None:
            new._pending = (pad(self._pending[0]),) + tuple(self._pending[1:])
        if self._last is not None:
            x, f, g = self._last
            new._last = (pad(x), f, pad(g))
        mem = new.mem
        mem.x0 = pad(mem.x0)
        mem.Z = np.vstack([mem.Z, np.zeros((d - d0, mem.Z.shape[1]))])
        mem.G = np.vstack([mem.G, np.zeros((d - d0, mem.G.shape[1]))])
        mem.X = np.hstack([mem.X, np.zeros((mem.X.shape[0], d - d0))])
        return new

    def switch_mode(self, mode):
        if mode not in ("spgm", "ogm"):
            raise ValueError(mode)
        if mode == "spgm" and not self._mem_complete:
            raise ValueError("responses received in OGM mode were not stored; cannot switch to SPGM")
        self.mode = mode


# ------------------------------------------------------------------ traces

@dataclass
class TraceRecord:
    n: int
    f: float
    grad_norm: float
    gap_norm: float
    tau: float
    bound_inv: float
    status: str
    wall_ms: float


@dataclass
class RunTrace:
    method: str
    N: int
    L: float
    records: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    final_x: np.ndarray | None = None
    terminated_at: int | None = None
    rounds: list = field(default_factory=list)
    taus: list = field(default_factory=list)
    error: str | None = None

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    @property
    def final_f(self):
        return self.records[-1].f

    def forecast_matrix(self):
        """``tau_{n,N}`` for n = 0..len(taus)-1."""
        return np.array([tau_forecast(t, n, self.N)[-1] for n, t in enumerate(self.taus)])


def _as_oracle(p):
    ev = getattr(p, "evaluate", None)
    if ev is None:
        if callable(p):
            return p
        raise TypeError("problem must provide evaluate(x) or be callable")
    return ev


def drive(stepper, p, N, reference=None, keep_iterates=True, method=None, partial=False):
    """Run ``stepper`` against the oracle of ``p`` for ``N`` iterations.

    After early termination the output point is evaluated once and the
    remaining records repeat it, so every trace has ``N + 1`` rows. With
    ``partial=True`` a failure of the oracle or the stepper ends the run and
    is stored in ``trace.error``; the records collected so far are kept.
    """
    oracle = _as_oracle(p)
    L = stepper.L
    trace = RunTrace(method or stepper.name, N, L)
    scale = f_star = None
    if reference is not None:
        f_star = reference.f_star
        r = stepper.x - reference.x_star
        scale = 0.5 * L * float(r @ r)
    term = None
    x = stepper.x.copy()
    for n in range(N + 1):
        t0 = time.perf_counter()
        if term is not None:
            x, f, g = term
            status = "unbounded"
        elif getattr(stepper, "terminal", None) is not None:
            x = stepper.terminal.copy()
            f, g = oracle(x)
            term = (x, float(f), np.asarray(g, dtype=np.float64))
            x, f, g = term
            status = "unbounded"
            trace.terminated_at = n
        else:
            x = stepper.x.copy()
            st = stepper.status
            status = "none" if st is None else str(st)
            try:
                f, g = oracle(x)
                f = float(f)
                g = np.asarray(g, dtype=np.float64)
                stepper.tell(f, g)
            except Exception as exc:
                if not partial:
                    raise
                trace.error = f"{type(exc).__name__}: {exc}"
                break
        wall = 1e3 * (time.perf_counter() - t0)
        gap = float("nan")
        if scale is not None:
            gap = (f - f_star) / scale if scale > 0 else 0.0
        trace.records.append(TraceRecord(n, f, float(np.linalg.norm(g)), gap,
                                         _tau_at(stepper, n), _bound_at(stepper, n), status, wall))
        if keep_iterates:
            trace.iterates.append(x)
    trace.final_x = x
    trace.taus = list(getattr(stepper, "taus", []))
    trace.rounds = list(getattr(stepper, "rounds", []))
    return trace


def _tau_at(stepper, n):
    taus = getattr(stepper, "taus", None)
    if not taus:
        return float("nan")
    if n < len(taus):
        return taus[n]
    return float("inf")


def _bound_at(stepper, n):
    taus = getattr(stepper, "taus", None)
    if not taus:
        return float("nan")
    if n < len(taus):
        return 1.0 / float(tau_forecast(taus[n], n, stepper.N)[-1])
    return 0.0


def _x0(p, x0):
    return np.array(p.x0 if x0 is None else x0, dtype=np.float64)


def run_gd(p, x0=None, N=100, reference=None, keep_iterates=True, L=None):
    st = GradientDescent(p.L if L is None else L, _x0(p, x0), N)
    return drive(st, p, N, reference, keep_iterates, "gd")


def run_ogm(p, x0=None, N=100, reference=None, keep_iterates=True, L=None):
    st = SPGMStepper(p.L if L is None else L, _x0(p, x0), N, mode="ogm", keep_history=False)
    st.name = "ogm"
    return drive(st, p, N, reference, keep_iterates, "ogm")


def run_spgm(p, x0=None, N=100, reference=None, keep_iterates=True, L=None,
             solver_opts=None, on_solver_failure="warn"):
    st = SPGMStepper(p.L if L is None else L, _x0(p, x0), N, solver_opts=solver_opts,
                     on_solver_failure=on_solver_failure)
    st.name = "spgm"
    return drive(st, p, N, reference, keep_iterates, "spgm")


def run_k_spgm(p, x0=None, N=100, k=10, reference=None, keep_iterates=True, L=None,
               solver_opts=None, on_solver_failure="warn"):
    st = SPGMStepper(p.L if L is None else L, _x0(p, x0), N, memory=k, solver_opts=solver_opts,
                     keep_history=False, on_solver_failure=on_solver_failure)
    st.name = f"kspgm:{k}"
    return drive(st, p, N, reference, keep_iterates, f"kspgm:{k}")


def guarantee(trace: RunTrace, reference, p=None):
    """Achieved normalized final gap and the forecast bounds ``1/tau_{n,N}``.

    Every forecast is a valid bound on the final gap, so the check is
    ``achieved <= min(bounds)``.
    """
    L = trace.L
    x0 = trace.iterates[0] if trace.iterates else (p.x0 if p is not None else None)
    if x0 is None:
        raise ValueError("need the starting point")
    r = np.asarray(x0) - reference.x_star
    scale = 0.5 * L * float(r @ r)
    f_final = trace.records[-1].f
    achieved = (f_final - reference.f_star) / scale if scale > 0 else 0.0
    bounds = 1.0 / trace.forecast_matrix() if trace.taus else np.array([])
    return achieved, bounds


def gap_slack_scale(p, reference, g0=None) -> float:
    """Magnitude used for absolute slack on unnormalized gaps."""
    r = np.asarray(p.x0) - reference.x_star
    if g0 is None:
        g0 = p.evaluate(p.x0)[1]
    g0 = np.asarray(g0, dtype=np.float64)
    return max(1.0, abs(reference.f_star), p.L * float(r @ r), float(g0 @ g0) / p.L)


def upper_bound_check(trace: RunTrace, reference, p, slack=1e-8):
    """``(ok, gap, bound)`` for ``f_N - f* <= min_n L |x0-x*|^2 / (2 tau_{n,N}) + slack * scale``."""
    achieved, bounds = guarantee(trace, reference, p)
    half = trace.L * float(np.sum((np.asarray(p.x0) - reference.x_star) ** 2)) / 2.0
    gap = achieved * half
    bound = float(np.min(bounds)) * half
    return gap <= bound + slack * gap_slack_scale(p, reference), gap, bound
