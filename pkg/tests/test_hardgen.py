import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spgm.fo_core import q_matrix_arrays
from spgm.hardgen import (
    HardgenError,
    HardGD,
    HardInstance,
    build_hard_instance,
    continue_stepper,
    eval_hard,
    gap_identity_residual,
    play_continuations,
    q_full,
    span_residual,
    adversary_gap,
    switch_state,
    verify_all,
    verify_crossterms,
    verify_etas,
    verify_interpolation,
    verify_zero_chain,
)
from spgm.methods import SPGMStepper, delta_increment
from spgm.problems import Family, gen_random, quadratic_1d


def spgm_prefix(problem, N, n):
    st_ = SPGMStepper(problem.L, problem.x0, N)
    for _ in range(n):
        st_.tell(*problem.evaluate(st_.x))
    return st_


def build(problem, N, n, d=None, seed=0):
    st_ = spgm_prefix(problem, N, n)
    d = N + 2 if d is None else d
    base = st_.embedded(d) if d > st_.x0.size else st_
    hist, state = switch_state(base)
    return build_hard_instance(hist, state, N, d, seed)


@pytest.fixture(scope="module")
def quad_inst():
    return build(quadratic_1d(curvature=1.0, L=1.0, x0=1.0), N=2, n=1, d=4)


@pytest.fixture(scope="module")
def ls_inst():
    return build(gen_random(Family.LS_PLAIN, 8, 32, 0), N=10, n=3)


# ------------------------------------------------------------------ construction

def test_quadratic_constants(quad_inst):
    inst = quad_inst
    s5 = math.sqrt(5.0)
    assert inst.Delta == pytest.approx(4.0, rel=1e-14)
    assert inst.xi_star == pytest.approx(1.0, rel=1e-14)
    assert inst.f_star == pytest.approx(-1.0, rel=1e-14)
    assert inst.tau_half == pytest.approx(2.0, rel=1e-12)
    np.testing.assert_allclose(inst.z_half, [-1.0, 0, 0, 0], atol=1e-14)
    tau11 = 3.0 + s5
    assert inst.deltas[0] == pytest.approx(1.0 + s5, rel=1e-14)
    assert inst.taus[0] == pytest.approx(tau11, rel=1e-14)
    assert inst.deltas[1] == pytest.approx((1.0 + math.sqrt(1.0 + 4.0 * tau11)) / 2.0, rel=1e-14)
    # eta_1 = 1 / (2 tau_half delta_1)
    assert inst.etas[0] == pytest.approx(1.0 / (4.0 * (1.0 + s5)), rel=1e-14)
    assert inst.etas[0] == pytest.approx(0.0772542, abs=5e-8)


def test_eta_recursion_oracle(ls_inst):
    inst = ls_inst
    # independent evaluation of the eta / delta / tau recursions
    tau, acc = inst.tau_half, 0.0
    for k in range(inst.N - inst.n + 1):
        i = inst.n + k
        dl = delta_increment(tau, i == inst.N)
        eta = 1.0 / (2.0 * tau * dl) if k == 0 else (1.0 + acc) / (2.0 * tau * dl)
        tau += dl
        acc += dl * dl * eta
        assert inst.deltas[k] == pytest.approx(dl, rel=1e-13)
        assert inst.etas[k] == pytest.approx(eta, rel=1e-13)
        assert inst.taus[k] == pytest.approx(tau, rel=1e-13)


def test_new_gradients_orthogonal(ls_inst):
    inst = ls_inst
    n, N, L = inst.n, inst.N, inst.L
    GG = inst.G[: N + 1] @ inst.G[n: N + 1].T
    expect = np.zeros_like(GG)
    for k in range(N - n + 1):
        expect[n + k, k] = inst.etas[k] * L * L * inst.Delta
    np.testing.assert_allclose(GG, expect, rtol=0, atol=1e-12 * float(np.max(expect)))
    assert not np.any(inst.G[inst.star])


def test_plus_values_and_gap_identity(quad_inst, ls_inst):
    for inst in (quad_inst, ls_inst):
        Xp, Fp = inst.plus()
        for k in range(inst.N - inst.n + 1):
            want = inst.L * inst.Delta * (inst.deltas[k] - 1.0) * inst.etas[k]
            assert Fp[inst.n + k] - inst.f_star == pytest.approx(want, rel=1e-10)
        assert gap_identity_residual(inst) <= 1e-10


def test_x_star_is_last_z(ls_inst):
    np.testing.assert_array_equal(ls_inst.x_star, ls_inst.X[ls_inst.star])


def test_d_too_small():
    p = gen_random(Family.LS_PLAIN, 8, 32, 0)
    st_ = spgm_prefix(p, 10, 3)
    hist, state = switch_state(st_)
    with pytest.raises(ValueError, match="N \\+ 2"):
        build_hard_instance(hist, state, 10, 8)


def test_switch_requires_solved_round():
    p = gen_random(Family.LS_PLAIN, 8, 32, 0)
    with pytest.raises(ValueError):
        switch_state(SPGMStepper(p.L, p.x0, 10))


# ------------------------------------------------------------------ evaluation

def test_eval_at_stored_points(ls_inst):
    inst = ls_inst
    s = inst.scale()
    for i in range(inst.size):
        f, g = eval_hard(inst, inst.X[i])
        assert abs(f - inst.F[i]) <= 1e-8 * s
        assert np.linalg.norm(g - inst.G[i]) <= 1e-8 * s


def test_eval_at_star(quad_inst, ls_inst):
    for inst in (quad_inst, ls_inst):
        f, g = eval_hard(inst, inst.x_star)
        assert f == pytest.approx(inst.f_star, abs=1e-8 * inst.scale())
        assert np.linalg.norm(g) <= 1e-8 * inst.scale()


def test_eval_dimension_mismatch(ls_inst):
    with pytest.raises(ValueError):
        eval_hard(ls_inst, np.zeros(3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_minimum_is_f_star(seed):
    inst = _ls_inst_cached()
    rng = np.random.default_rng(seed)
    y = inst.x_star + rng.standard_normal(inst.d) * 10.0 ** rng.uniform(-3, 2)
    f, _ = eval_hard(inst, y)
    assert f >= inst.f_star - 1e-10 * inst.scale()


_CACHE = {}


def _ls_inst_cached():
    if "ls" not in _CACHE:
        _CACHE["ls"] = build(gen_random(Family.LS_PLAIN, 8, 32, 0), N=10, n=3)
    return _CACHE["ls"]


def test_gradient_finite_differences(ls_inst):
    inst = ls_inst
    rng = np.random.default_rng(3)
    for _ in range(10):
        k = rng.integers(inst.size)
        y = inst.X[k] + 0.1 * rng.standard_normal(inst.d) * np.linalg.norm(inst.X[k] - inst.x0)
        _, g = eval_hard(inst, y, tol=0.0)
        h = 1e-5 * max(1.0, float(np.linalg.norm(y)))
        fd = np.empty(inst.d)
        for c in range(inst.d):
            e = np.zeros(inst.d)
            e[c] = h
            fd[c] = (eval_hard(inst, y + e, tol=0.0)[0] - eval_hard(inst, y - e, tol=0.0)[0]) / (2 * h)
        assert np.linalg.norm(fd - g) <= 1e-5 * max(np.linalg.norm(g), 1e-12)


def test_zero_chain_behaviour(ls_inst):
    inst = ls_inst
    rng = np.random.default_rng(5)
    r = float(np.linalg.norm(inst.X[inst.n] - inst.x0))
    for j in range(inst.n, inst.N + 1):
        B = inst.G[:j].T
        for _ in range(5):
            coef = rng.standard_normal(j)
            y = inst.x0 + B @ coef * (r / np.linalg.norm(B @ coef))
            _, g = eval_hard(inst, y, tol=0.0)
            C = inst.G[: j + 1].T
            out = g - C @ np.linalg.lstsq(C, g, rcond=None)[0]
            assert np.linalg.norm(out) <= 1e-8 * np.linalg.norm(g)


# ------------------------------------------------------------------ verification

def test_verify_all_pass(quad_inst, ls_inst):
    for inst in (quad_inst, ls_inst):
        reps = verify_all(inst)
        assert all(r.ok for r in reps), [r.failures() for r in reps]


def test_interpolation_report_has_cases(ls_inst):
    rep = verify_interpolation(ls_inst)
    for c in (1, 2, 3, 4, 5, 6, 7, 8, 9):
        assert any(k.startswith(f"case {c}:") for k in rep.worst)


def test_case_nine_is_zero(ls_inst):
    inst = ls_inst
    Q = q_full(inst)
    for j in range(inst.n, inst.N + 1):
        assert abs(Q[inst.star, j]) <= 1e-12 * inst.scale()


def test_case_one_matches_history(ls_inst):
    inst = ls_inst
    n = inst.n
    Q = q_full(inst)
    Xh, Fh, Gh = inst.X[:n], inst.F[:n], inst.G[:n]
    Qh = q_matrix_arrays(Xh - inst.x0, Fh - inst.f_star, Gh, inst.L)
    np.testing.assert_allclose(Q[:n, :n], Qh, rtol=0, atol=1e-12 * inst.scale())


def test_rotation_invariance():
    p = gen_random(Family.LS_PLAIN, 8, 32, 0)
    a = build(p, N=10, n=3, seed=0)
    b = build(p, N=10, n=3, seed=1)
    assert not np.allclose(a.G[a.n:a.N + 1], b.G[b.n:b.N + 1])
    np.testing.assert_allclose(q_full(a), q_full(b), rtol=0, atol=1e-10 * a.scale())


def test_zero_chain_report_cases(ls_inst):
    inst = ls_inst
    rep = verify_zero_chain(inst)
    assert rep.ok, rep.failures()
    Q = q_full(inst)
    L, D = inst.L, inst.Delta
    dx = inst.X - inst.x0
    n = inst.n
    for j in range(n, inst.N):
        for ell in range(j + 1, inst.N + 1):
            # i = j < l: the residual reduces to Q_{j,l}
            r = Q[j, ell] - Q[j, j] + dx[j] @ (inst.G[ell] - inst.G[j])
            assert r == pytest.approx(Q[j, ell], abs=1e-9 * inst.scale())
            for i in range(ell + 1, inst.N + 1):
                r = Q[i, ell] - Q[i, j] + dx[i] @ (inst.G[ell] - inst.G[j])
                kj, kl = j - n, ell - n
                want = L * D * (inst.deltas[kj] * inst.etas[kj] - inst.deltas[kl] * inst.etas[kl])
                assert r == pytest.approx(want, abs=1e-9 * inst.scale())


def test_eta_and_crossterm_reports(ls_inst):
    assert verify_etas(ls_inst).ok
    assert verify_crossterms(ls_inst).ok


# ------------------------------------------------------------------ persistence

def test_json_round_trip(ls_inst):
    back = HardInstance.loads(ls_inst.dumps())
    for k in ("X", "F", "G", "x_star", "etas", "deltas", "taus", "z_half", "orthobasis"):
        np.testing.assert_allclose(getattr(back, k), getattr(ls_inst, k), rtol=1e-15, atol=0)
    for k in ("L", "d", "n", "N", "Delta", "xi_star", "f_star", "tau_half", "half_index"):
        assert getattr(back, k) == getattr(ls_inst, k)
    y = ls_inst.X[ls_inst.n] + 0.01
    assert eval_hard(back, y)[0] == eval_hard(ls_inst, y)[0]


def test_loads_rejects_other_records():
    with pytest.raises(ValueError):
        HardInstance.from_record({"kind": "transcript"})


# ------------------------------------------------------------------ play

def test_continuations_meet_bound():
    p = gen_random(Family.LS_PLAIN, 8, 32, 0)
    st_ = spgm_prefix(p, 10, 3)
    inst, gaps = play_continuations(st_, 10, d=12, seed=0)
    spgm_gap, bound = gaps["spgm"]
    assert spgm_gap == pytest.approx(bound, rel=1e-6)
    for name in ("ogm", "gd"):
        assert gaps[name][0] >= (1 - 1e-6) * bound


def test_lazy_method(ls_inst):
    inst = ls_inst
    gap = adversary_gap(inst, [inst.x0] * (inst.N - inst.n + 1))
    assert gap == pytest.approx(eval_hard(inst, inst.x0)[0] - inst.f_star)
    assert gap >= inst.bound()


def test_span_violation(ls_inst):
    inst = ls_inst
    q = continue_stepper(inst, HardGD(inst.L, inst.X[inst.n]))
    bad = list(q)
    bad[-1] = bad[-1] + inst.orthobasis[:, -1]  # g_N direction is not yet revealed
    assert span_residual(inst, bad[-1], inst.N) > 1e-8
    with pytest.raises(ValueError, match="span"):
        adversary_gap(inst, bad)
    with pytest.raises(ValueError):
        adversary_gap(inst, q[:-1])


def test_inner_solver_error_type():
    assert issubclass(HardgenError, RuntimeError)
