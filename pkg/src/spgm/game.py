"""The minimization game between a method (Alice) and an oracle (Bob).

Alice queries ``x_0, ..., x_N``; Bob answers each query with a value and a
gradient that must stay consistent with some L-smooth convex function, then
declares a minimizer ``(x*, f*)``. Alice's payoff is

    (L |x0 - x*|^2 / 2) / (f_N - f*),

flagged infinite when the denominator is not positive. Both players' moves
are validated: Alice must stay in ``x0 + span{g_0..g_{n-1}}`` and Bob's
answers must remain interpolable.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fo_core import data_scale, q_matrix_arrays
from .hardgen import (HardInstance, build_hard_instance, eval_hard, switch_state,
                      verify_interpolation)
from .methods import GradientDescent, SPGMStepper
from .problems import ProblemInstance, ReferenceOptimum

SPAN_TOL = 1e-8
INTERP_TOL = 1e-9


class ForfeitError(RuntimeError):
    """A player made an illegal move."""

    def __init__(self, player: str, round_: int | None, reason: str):
        self.player, self.round, self.reason = player, round_, reason
        where = "at the star declaration" if round_ is None else f"in round {round_}"
        super().__init__(f"{player} forfeits {where}: {reason}")


class ProtocolError(RuntimeError):
    """A strategy was driven outside the game protocol."""


# ------------------------------------------------------------------ records

@dataclass(frozen=True)
class Payoff:
    numerator: float            # L |x0 - x*|^2 / 2
    denominator: float          # f_N - f*

    @property
    def infinite(self) -> bool:
        return self.denominator <= 0.0

    @property
    def value(self) -> float:
        return math.inf if self.infinite else self.numerator / self.denominator

    def __float__(self):
        return self.value

    def csv_fields(self):
        """``(value, infinite_flag, denominator)`` with no float infinity."""
        return ("" if self.infinite else repr(self.value), int(self.infinite), repr(self.denominator))


@dataclass
class Transcript:
    L: float
    d: int
    N: int
    x0: np.ndarray
    queries: list = field(default_factory=list)
    values: list = field(default_factory=list)
    grads: list = field(default_factory=list)
    x_star: np.ndarray | None = None
    f_star: float | None = None
    alice: str = ""
    bob: str = ""

    def arrays(self, with_star=False):
        X = np.array(self.queries, dtype=np.float64).reshape(-1, self.d)
        F = np.array(self.values, dtype=np.float64)
        G = np.array(self.grads, dtype=np.float64).reshape(-1, self.d)
        if with_star and self.x_star is not None:
            X = np.vstack([X, self.x_star])
            F = np.append(F, self.f_star)
            G = np.vstack([G, np.zeros(self.d)])
        return X, F, G

    def payoff(self) -> Payoff:
        if self.x_star is None or len(self.values) != self.N + 1:
            raise ProtocolError("the game is not finished")
        r = self.x0 - self.x_star
        return Payoff(0.5 * self.L * float(r @ r), float(self.values[-1]) - float(self.f_star))

    def validate(self):
        """Replay every legality check from the record alone."""
        if len(self.queries) != self.N + 1:
            raise ProtocolError(f"expected {self.N + 1} rounds, found {len(self.queries)}")
        for n in range(self.N + 1):
            check_span(self, n)
            check_interpolable(self, n)
        check_star(self)

    # -- serialization (same text record style as hard instances)
    def to_record(self) -> dict:
        return {
            "kind": "transcript", "L": self.L, "d": self.d, "N": self.N,
            "x0": np.asarray(self.x0).tolist(),
            "queries": [np.asarray(x).tolist() for x in self.queries],
            "values": [float(f) for f in self.values],
            "grads": [np.asarray(g).tolist() for g in self.grads],
            "x_star": None if self.x_star is None else np.asarray(self.x_star).tolist(),
            "f_star": self.f_star, "alice": self.alice, "bob": self.bob,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Transcript":
        if rec.get("kind") != "transcript":
            raise ValueError("not a transcript record")
        return cls(
            L=float(rec["L"]), d=int(rec["d"]), N=int(rec["N"]),
            x0=np.array(rec["x0"], dtype=np.float64),
            queries=[np.array(x, dtype=np.float64) for x in rec["queries"]],
            values=[float(f) for f in rec["values"]],
            grads=[np.array(g, dtype=np.float64) for g in rec["grads"]],
            x_star=None if rec["x_star"] is None else np.array(rec["x_star"], dtype=np.float64),
            f_star=rec["f_star"], alice=rec.get("alice", ""), bob=rec.get("bob", ""),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_record())

    @classmethod
    def loads(cls, text: str) -> "Transcript":
        return cls.from_record(json.loads(text))


def check_span(tr: Transcript, n: int):
    x = np.asarray(tr.queries[n], dtype=np.float64)
    v = x - tr.x0
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        return
    if n == 0:
        raise ForfeitError("Alice", n, "the first query must be x0")
    B = np.array(tr.grads[:n]).T
    coef = np.linalg.lstsq(B, v, rcond=None)[0]
    res = float(np.linalg.norm(v - B @ coef)) / nv
    if res > SPAN_TOL:
        raise ForfeitError("Alice", n, f"query leaves x0 + span of seen gradients (residual {res:.2e})")


def check_interpolable(tr: Transcript, n: int):
    """New response ``n`` against responses ``0..n`` (row and column of ``Q``)."""
    X, F, G = tr.arrays()
    X, F, G = X[: n + 1] - tr.x0, F[: n + 1], G[: n + 1]
    Q = q_matrix_arrays(X, F - F[0], G, tr.L)
    scale = data_scale(X, F - F[0], G, tr.L)
    worst = min(float(np.min(Q[n, :])), float(np.min(Q[:, n])))
    if worst < -INTERP_TOL * scale:
        raise ForfeitError("Bob", n, f"responses are not interpolable (Q = {worst:.3e})")


def check_star(tr: Transcript):
    if tr.x_star is None:
        raise ForfeitError("Bob", None, "no minimizer declared")
    X, F, G = tr.arrays(with_star=True)
    X, F = X - tr.x0, F - tr.f_star
    Q = q_matrix_arrays(X, F, G, tr.L)
    scale = data_scale(X, F, G, tr.L)
    worst = min(float(np.min(Q[-1, :])), float(np.min(Q[:, -1])))
    if worst < -INTERP_TOL * scale:
        raise ForfeitError("Bob", None, f"declared minimizer is not interpolable (Q = {worst:.3e})")


# ------------------------------------------------------------------ Alice

@dataclass
class Alice:
    """A query strategy: ``factory(L, x0, N)`` returns an ask/tell stepper."""
    name: str
    factory: Callable


def alice_gd():
    return Alice("gd", lambda L, x0, N: GradientDescent(L, x0, N))


def alice_ogm():
    return Alice("ogm", lambda L, x0, N: SPGMStepper(L, x0, N, mode="ogm", keep_history=False))


def alice_spgm(k: int | None = None):
    name = "spgm" if k is None else f"kspgm:{k}"
    return Alice(name, lambda L, x0, N: SPGMStepper(L, x0, N, memory=k))


ALICES = {"gd": alice_gd, "ogm": alice_ogm, "spgm": alice_spgm}


# ------------------------------------------------------------------ Bob

class Bob:
    """Oracle strategy protocol."""
    name = "bob"

    def begin(self, x0, L, d, N):
        self.N = N
        self.rounds = 0

    def _count(self):
        if self.rounds > self.N:
            raise ProtocolError(f"{self.name}: asked for more than N + 1 = {self.N + 1} responses")
        self.rounds += 1

    def respond(self, n, x):
        raise NotImplementedError

    def declare(self):
        raise NotImplementedError


def _embed(v, d):
    out = np.zeros(d)
    out[: v.size] = v
    return out


class FunctionBob(Bob):
    """Honest oracle for a problem instance (lifted to ``R^d`` by ignoring extra coordinates)."""

    def __init__(self, p: ProblemInstance, reference: ReferenceOptimum):
        if reference is None:
            raise ValueError("a reference optimum is required to declare the minimizer")
        self.p, self.ref = p, reference
        self.name = f"function:{p.family.value}"

    def begin(self, x0, L, d, N):
        super().begin(x0, L, d, N)
        self.d = d

    def respond(self, n, x):
        self._count()
        f, g = self.p.evaluate(np.asarray(x)[: self.p.d])
        return f, _embed(np.asarray(g), self.d)

    def declare(self):
        if self.rounds != self.N + 1:
            raise ProtocolError(f"{self.name}: star declared after {self.rounds} of {self.N + 1} rounds")
        return _embed(np.asarray(self.ref.x_star), self.d), float(self.ref.f_star)


class HardBob(Bob):
    """Answers with a fixed hard instance."""

    def __init__(self, inst: HardInstance):
        self.inst = inst
        self.name = "hard"

    def respond(self, n, x):
        self._count()
        return eval_hard(self.inst, np.asarray(x))

    def declare(self):
        if self.rounds != self.N + 1:
            raise ProtocolError(f"{self.name}: star declared after {self.rounds} of {self.N + 1} rounds")
        return self.inst.x_star.copy(), self.inst.f_star


def bob_from_function(p, reference: ReferenceOptimum | None = None) -> Bob:
    """Wrap a problem instance or a hard instance as an honest Bob."""
    if isinstance(p, HardInstance):
        return HardBob(p)
    return FunctionBob(p, reference)


class AdversaryBob(Bob):
    """Honest on ``p`` for rounds ``0..n-1``, then the hard continuation.

    Bob shadows SPGM on the transcript so far (the subproblem data depend
    only on the history), builds the hard instance at round ``n`` and answers
    with it from then on. The construction is only guaranteed for histories
    SPGM itself produced, so Bob verifies the instance before switching and
    stays honest if it is not interpolable (reason kept in ``notes``); the
    same happens when the shadow run terminates before round ``n``.
    """

    def __init__(self, p: ProblemInstance, n: int, reference: ReferenceOptimum | None = None,
                 seed: int = 0):
        if n < 1:
            raise ValueError("the switch round must be at least 1")
        self.p, self.switch, self.ref, self.seed = p, n, reference, seed
        self.name = f"adversary:{n}"
        self.inst = None

    def begin(self, x0, L, d, N):
        super().begin(x0, L, d, N)
        if self.switch > N:
            raise ValueError("the switch round exceeds the budget")
        self.d = d
        self.shadow = SPGMStepper(L, np.asarray(x0, dtype=np.float64), N)
        self.inst = None
        self.notes = []

    def respond(self, n, x):
        self._count()
        if n == self.switch and self.shadow.terminal is None:
            hist, state = switch_state(self.shadow)
            inst = build_hard_instance(hist, state, self.N, self.d, self.seed)
            rep = verify_interpolation(inst)
            if rep.ok:
                self.inst = inst
            else:
                self.notes.append(f"construction rejected at round {n}: {rep.failures()}")
                warnings.warn("adversary stays honest: " + self.notes[-1], RuntimeWarning)
        if self.inst is not None:
            return eval_hard(self.inst, np.asarray(x))
        f, g = self.p.evaluate(np.asarray(x)[: self.p.d])
        g = _embed(np.asarray(g), self.d)
        # the shadow records Alice's actual query; for an SPGM Alice it is the same point
        if self.shadow.terminal is None and n < self.N:
            self.shadow.x = np.array(x, dtype=np.float64)
            self.shadow.tell(f, g)
        return f, g

    def declare(self):
        if self.rounds != self.N + 1:
            raise ProtocolError(f"{self.name}: star declared after {self.rounds} of {self.N + 1} rounds")
        if self.inst is not None:
            return self.inst.x_star.copy(), self.inst.f_star
        if self.ref is None:
            raise ProtocolError("the adversary never switched and has no reference optimum")
        return _embed(np.asarray(self.ref.x_star), self.d), float(self.ref.f_star)


# ------------------------------------------------------------------ play

def play(alice: Alice, bob: Bob, x0, L: float, d: int | None = None, N: int = 10):
    """Run the ``N + 1`` rounds and return ``(transcript, payoff)``."""
    x0 = np.asarray(x0, dtype=np.float64)
    d = x0.size if d is None else int(d)
    if x0.size < d:
        x0 = _embed(x0, d)
    if N < 1:
        raise ValueError("N must be at least 1")
    tr = Transcript(float(L), d, int(N), x0.copy(), alice=alice.name, bob=bob.name)
    stepper = alice.factory(L, x0, N)
    bob.begin(x0, L, d, N)
    for n in range(N + 1):
        x = np.array(getattr(stepper, "terminal", None) if getattr(stepper, "terminal", None) is not None
                     else stepper.x, dtype=np.float64)
        if x.shape != (d,) or not np.all(np.isfinite(x)):
            raise ForfeitError("Alice", n, "query is not a finite point of the right dimension")
        tr.queries.append(x)
        check_span(tr, n)
        f, g = bob.respond(n, x)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != (d,) or not np.isfinite(f) or not np.all(np.isfinite(g)):
            raise ForfeitError("Bob", n, "response is not finite or has the wrong dimension")
        tr.values.append(float(f))
        tr.grads.append(g)
        check_interpolable(tr, n)
        if n < N and getattr(stepper, "terminal", None) is None:
            stepper.tell(f, g)
    x_star, f_star = bob.declare()
    tr.x_star, tr.f_star = np.asarray(x_star, dtype=np.float64), float(f_star)
    check_star(tr)
    return tr, tr.payoff()
