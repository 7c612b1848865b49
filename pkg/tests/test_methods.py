import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spgm.methods import (SPGMStepper, delta_increment, drive, gap_slack_scale, guarantee,
                          ogm_tau, run_gd, run_k_spgm, run_ogm, run_spgm, tau_forecast,
                          upper_bound_check)
from spgm.problems import Family, gen_random, quadratic_1d, reference_optimum
from spgm.subqp import SubproblemStatus

from conftest import PSDQuadratic

REF_OGM = (1.0, -0.6180339887498949, 0.45588678010286676, -0.3636639571190878, 0.30350121938992136)


def kim_fessler_ogm(oracle, x0, L, N):
    """Textbook OGM (theta form) as an independent reference; returns x_0..x_N."""
    x = np.array(x0, dtype=float)
    y = x.copy()
    theta = 1.0
    xs = [x.copy()]
    for k in range(N):
        _, g = oracle(x)
        y_new = x - g / L
        c = 4.0 if k < N - 1 else 8.0
        theta_new = (1 + math.sqrt(1 + c * theta * theta)) / 2
        x = y_new + (theta - 1) / theta_new * (y_new - y) + theta / theta_new * (y_new - x)
        y, theta = y_new, theta_new
        xs.append(x.copy())
    return xs, theta


class TestIncrements:
    def test_values(self):
        assert delta_increment(2.0) == pytest.approx(1 + math.sqrt(5), rel=1e-15)
        assert delta_increment(2.0, is_final=True) == 2.0
        assert delta_increment(0.0, is_final=True) == 1.0

    def test_negative(self):
        with pytest.raises(ValueError):
            delta_increment(-1.0)

    def test_forecast_one_step(self):
        np.testing.assert_array_equal(tau_forecast(2.0, 0, 1), [2.0, 4.0])

    def test_forecast_two_steps(self):
        t1 = 3 + math.sqrt(5)
        t2 = t1 + (1 + math.sqrt(1 + 4 * t1)) / 2
        np.testing.assert_allclose(tau_forecast(2.0, 0, 2), [2.0, t1, t2], rtol=1e-15)
        assert t1 == pytest.approx(5.2360680, abs=1e-7)

    def test_forecast_range(self):
        with pytest.raises(ValueError):
            tau_forecast(2.0, 3, 2)

    def test_quadratic_growth(self):
        r = ogm_tau(500) * 2 / 500**2
        assert 1.0 <= r <= 1.2

    @pytest.mark.parametrize("N", [1, 2, 5, 40])
    def test_matches_theta_recursion(self, N):
        # tau = 2 theta^2 before the last step and tau_N = theta_N^2
        _, theta = kim_fessler_ogm(lambda x: (0.0, np.zeros(1)), [0.0], 1.0, N)
        assert ogm_tau(N) == pytest.approx(theta**2, rel=1e-13)

    @settings(max_examples=200)
    @given(st.floats(0.0, 1e8), st.integers(0, 30), st.integers(0, 30))
    def test_forecast_monotone(self, tau, n, extra):
        f = tau_forecast(tau, n, n + extra)
        assert np.all(np.diff(f) > 0)

    @settings(max_examples=200)
    @given(st.floats(0.0, 1e6), st.floats(0.0, 1e6), st.integers(0, 10), st.integers(11, 20))
    def test_forecast_order_preserving(self, a, b, n, N):
        lo, hi = sorted((a, b))
        assert tau_forecast(lo, n, N)[-1] <= tau_forecast(hi, n, N)[-1]


class TestGradientDescent:
    def test_exact_step(self, quad):
        tr = run_gd(quad, N=3)
        assert tr.iterates[1][0] == 0.0

    def test_overestimated_L(self):
        p = quadratic_1d(curvature=1.0, L=2.0, x0=1.0)
        tr = run_gd(p, N=6)
        np.testing.assert_allclose([x[0] for x in tr.iterates], 0.5 ** np.arange(7), rtol=1e-15)

    @pytest.mark.parametrize("fam", [Family.LS_PLAIN, Family.LOG_SUM_EXP, Family.LOGISTIC_L2])
    def test_descent(self, fam):
        tr = run_gd(gen_random(fam, 8, 32, 1), N=50)
        f = tr.column("f")
        assert np.all(np.diff(f) <= 1e-12 * np.abs(f[:-1]).max())


class TestOGM:
    def test_reference_trajectory(self, quad):
        tr = run_ogm(quad, N=5)
        np.testing.assert_allclose([x[0] for x in tr.iterates[:5]], REF_OGM, atol=1e-9)

    def test_last_step_uses_final_increment(self, quad):
        tr = run_ogm(quad, N=4)
        xs, _ = kim_fessler_ogm(quad.evaluate, quad.x0, 1.0, 4)
        np.testing.assert_allclose([x[0] for x in tr.iterates], [x[0] for x in xs], atol=1e-14)
        np.testing.assert_allclose([x[0] for x in tr.iterates[:4]], REF_OGM[:4], atol=1e-9)

    @pytest.mark.parametrize("N", [1, 4, 10, 25])
    def test_worst_case_equality_on_quadratic(self, quad, N):
        ref = reference_optimum(quad)
        tr = run_ogm(quad, N=N, reference=ref)
        assert tr.records[-1].gap_norm == pytest.approx(1.0 / ogm_tau(N), rel=1e-6)
        if N == 1:
            assert tr.records[-1].bound_inv == 0.25

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_theta_form(self, seed):
        p = gen_random(Family.LS_L2, 6, 24, seed)
        tr = run_ogm(p, N=15)
        xs, _ = kim_fessler_ogm(p.evaluate, p.x0, p.L, 15)
        for a, b in zip(tr.iterates, xs):
            np.testing.assert_allclose(a, b, atol=1e-12 * (1 + np.linalg.norm(b)))

    def test_start_at_minimizer(self):
        p = quadratic_1d(x0=0.0)
        tr = run_ogm(p, N=5)
        assert all(x[0] == 0.0 for x in tr.iterates)

    def test_constant_guarantee(self):
        p = gen_random(Family.LS_PLAIN, 8, 32, 0)
        tr = run_ogm(p, N=20)
        _, bounds = guarantee(tr, reference_optimum(p))
        np.testing.assert_allclose(bounds, 1.0 / ogm_tau(20), rtol=1e-14)


class TestSPGM:
    def test_first_round_on_quadratic(self, quad):
        st_ = SPGMStepper(1.0, [1.0], N=4)
        st_.tell(*quad.evaluate(st_.x))
        r = st_.rounds[0]
        assert r.tau_half == pytest.approx(2.0, abs=1e-9)
        assert r.z_half[0] == pytest.approx(-1.0, abs=1e-9)
        assert st_.x[0] == pytest.approx(REF_OGM[1], abs=1e-9)

    def test_detects_minimizer_on_quadratic(self, quad):
        tr = run_spgm(quad, N=4, reference=reference_optimum(quad))
        assert tr.rounds[1].status is SubproblemStatus.UNBOUNDED
        assert tr.terminated_at == 2
        assert abs(tr.final_x[0]) <= 1e-9
        assert len(tr.records) == 5
        assert tr.records[-1].gap_norm <= 1e-9

    @pytest.mark.parametrize("fam", [Family.LS_PLAIN, Family.LS_HUBER_NORM, Family.LOG_SUM_EXP,
                                     Family.MOREAU_MAX])
    def test_upper_bound(self, fam):
        p = gen_random(fam, 8, 32, 3)
        ref = reference_optimum(p)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            tr = run_spgm(p, N=30, reference=ref)
        ok, gap, bound = upper_bound_check(tr, ref, p)
        assert ok, (gap, bound)
        fc = tr.forecast_matrix()
        assert np.all(np.diff(fc) >= -1e-12 * fc[1:])

    def test_tau_chain_and_step_algebra(self):
        p = gen_random(Family.LS_L2, 6, 24, 2)
        N = 12
        st_ = SPGMStepper(p.L, p.x0, N)
        while st_.n <= N:
            st_.tell(*p.evaluate(st_.x))
            if st_.n <= N:
                r = st_.rounds[-1]
                tau_prev, tau_n = st_.taus[-2], st_.taus[-1]
                assert r.tau_half >= tau_prev
                final = st_.n == N
                assert tau_n == pytest.approx(r.tau_half + delta_increment(r.tau_half, final), rel=1e-15)
                a, b = r.tau_half / tau_n, 1 - r.tau_half / tau_n
                x_half_plus = r.x_half - p.evaluate(r.x_half)[1] / p.L
                np.testing.assert_allclose(st_.x, a * x_half_plus + b * r.z_half, atol=1e-12)
                assert 0 <= a <= 1

    def test_half_point_is_smallest_plus_value(self):
        p = gen_random(Family.LOG_SUM_EXP, 5, 20, 4)
        tr = run_spgm(p, N=10)
        fp = [rec.f - rec.grad_norm**2 / (2 * p.L) for rec in tr.records]
        for r in tr.rounds:
            prior = fp[: r.n]
            assert r.half_index == int(np.argmin(prior))

    @pytest.mark.parametrize("k", [None, 1, 3])
    def test_iterates_stay_in_gradient_span(self, k):
        p = gen_random(Family.LOGISTIC_L2, 10, 40, 0)
        tr = run_spgm(p, N=8) if k is None else run_k_spgm(p, N=8, k=k)
        grads = []
        for n, x in enumerate(tr.iterates):
            v = x - p.x0
            if grads:
                B = np.array(grads).T
                res = v - B @ np.linalg.lstsq(B, v, rcond=None)[0]
                assert np.linalg.norm(res) <= 1e-8 * max(1.0, np.linalg.norm(v))
            grads.append(p.evaluate(x)[1])

    @pytest.mark.parametrize("seed", range(3))
    def test_full_window_equals_unlimited(self, seed):
        p = gen_random(Family.LS_HUBER_L1, 6, 24, seed)
        a = run_spgm(p, N=12)
        b = run_k_spgm(p, N=12, k=12)
        for x, y in zip(a.iterates, b.iterates):
            np.testing.assert_allclose(x, y, atol=1e-8)

    def test_window_of_one_keeps_certified_rate(self):
        p = gen_random(Family.LOG_SUM_EXP, 6, 24, 5)
        tr = run_k_spgm(p, N=20, k=1)
        for r in tr.rounds:
            assert r.tau_half >= tr.taus[r.n - 1]

    def test_limited_memory_bound_beats_ogm(self):
        p = gen_random(Family.LS_PLAIN, 16, 64, 1)
        tr = run_k_spgm(p, N=30, k=5)
        assert tr.forecast_matrix()[-1] >= ogm_tau(30) * (1 - 1e-12)

    def test_budget_contract(self):
        p = gen_random(Family.LS_L2, 3, 6, 0)
        st_ = SPGMStepper(p.L, p.x0, N=2)
        for _ in range(3):
            st_.tell(*p.evaluate(st_.x))
        with pytest.raises(RuntimeError):
            st_.tell(*p.evaluate(st_.x))

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            SPGMStepper(1.0, [0.0], N=0)
        with pytest.raises(ValueError):
            SPGMStepper(1.0, [0.0], N=3, memory=0)
        with pytest.raises(ValueError):
            SPGMStepper(1.0, [0.0], N=3, mode="other")

    def test_ogm_mode_cannot_switch_back(self):
        p = gen_random(Family.LS_L2, 3, 6, 0)
        st_ = SPGMStepper(p.L, p.x0, N=5, mode="ogm")
        st_.switch_mode("ogm")
        st_.tell(*p.evaluate(st_.x))
        with pytest.raises(ValueError):
            st_.switch_mode("spgm")

    def test_embedding_continues_identically(self):
        p = gen_random(Family.LS_L2, 4, 16, 1)
        N, d = 10, 9
        a = SPGMStepper(p.L, p.x0, N)
        for _ in range(4):
            a.tell(*p.evaluate(a.x))
        b = a.embedded(d)
        assert b.x.shape == (d,) and np.all(b.x[4:] == 0)

        def padded(x):
            f, g = p.evaluate(x[:4])
            out = np.zeros(d)
            out[:4] = g
            return f, out

        while a.n <= N:
            np.testing.assert_allclose(b.x[:4], a.x, atol=1e-12)
            a.tell(*p.evaluate(a.x))
            b.tell(*padded(b.x))
        assert a.taus == pytest.approx(b.taus, rel=1e-10)
        with pytest.raises(ValueError):
            a.embedded(2)


class TestDrive:
    def test_partial_run_keeps_records(self):
        p = gen_random(Family.LS_L2, 3, 6, 0)
        calls = []

        def oracle(x):
            calls.append(1)
            if len(calls) == 4:
                raise FloatingPointError("overflow in oracle")
            return p.evaluate(x)

        st_ = SPGMStepper(p.L, p.x0, N=10)
        tr = drive(st_, oracle, 10, partial=True)
        assert len(tr.records) == 3
        assert tr.error.startswith("FloatingPointError")
        with pytest.raises(FloatingPointError):
            calls.clear()
            drive(SPGMStepper(p.L, p.x0, N=10), oracle, 10)

    def test_slack_scale(self):
        p = gen_random(Family.LS_PLAIN, 4, 16, 0)
        ref = reference_optimum(p)
        s = gap_slack_scale(p, ref)
        r = p.x0 - ref.x_star
        assert s >= max(1.0, abs(ref.f_star), p.L * float(r @ r))


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1), st.integers(2, 12))
def test_spgm_guarantee_on_random_quadratics(d, seed, N):
    q = PSDQuadratic(d, seed, rank=max(1, d - 1))
    st_ = SPGMStepper(q.L, q.x0, N)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        tr = drive(st_, q.evaluate, N)
    f_final = tr.records[-1].f
    bound = q.L * float(q.x0 @ q.x0) / (2 * tr.forecast_matrix()[-1]) if tr.terminated_at is None else 0.0
    assert f_final <= bound + 1e-8 * max(1.0, q.L * float(q.x0 @ q.x0))
