import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spgm.fo_core import (AuxCertificate, FirstOrderTriple, History, aux_residual,
                          coupling_q, coupling_q_raw, is_interpolable, plus_transform, q_matrix)
from spgm.methods import SPGMStepper

from conftest import PSDQuadratic

T = FirstOrderTriple


class TestPlusTransform:
    def test_quadratic_at_one(self):
        p = plus_transform(T(1.0, 0.5, 1.0), 1.0)
        assert p.x_plus[0] == 0.0 and p.f_plus == 0.0

    def test_stationary_point_fixed(self):
        for L in (0.1, 1.0, 7.0):
            p = plus_transform(T(0.0, 3.25, 0.0), L)
            assert p.x_plus[0] == 0.0 and p.f_plus == 3.25

    def test_quadratic_at_two(self):
        p = plus_transform(T(2.0, 2.0, 2.0), 1.0)
        assert p.x_plus[0] == 0.0 and p.f_plus == 0.0

    @pytest.mark.parametrize("L", [0.0, -1.0, math.inf, math.nan])
    def test_bad_L(self, L):
        with pytest.raises(ValueError):
            plus_transform(T(1.0, 0.5, 1.0), L)

    def test_triple_validation(self):
        with pytest.raises(ValueError):
            T([1.0, 2.0], 0.0, [1.0])
        with pytest.raises(ValueError):
            T([math.nan], 0.0, [1.0])


class TestCouplingQ:
    def test_tight_pair(self):
        assert coupling_q(T(1, 0.5, 1), T(0, 0, 0), 1.0) == 0.0

    def test_violating_pair(self):
        # the order matters: only one direction of the pair violates the bound
        assert coupling_q(T(1, 0, 1), T(0, 0, 0), 1.0) == -0.5
        assert coupling_q(T(0, 0, 0), T(1, 0, 1), 1.0) == 0.5

    def test_identity(self):
        t = T([0.3, -1.2], 4.0, [2.0, 0.5])
        assert coupling_q(t, t, 3.0) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            coupling_q(T([1.0], 0, [1.0]), T([1.0, 2.0], 0, [1.0, 0.0]), 1.0)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=8, max_size=8), st.floats(0.1, 10))
    def test_plus_form_matches_definition(self, v, L):
        ti = T(v[0:2], v[2], v[3:5])
        tj = T(v[5:7], v[7], v[0:2])
        a, b = coupling_q(ti, tj, L), coupling_q_raw(ti, tj, L)
        mag = 1 + sum(abs(x) for x in v) ** 2 * max(L, 1 / L)
        assert abs(a - b) <= 1e-12 * mag


class TestIsInterpolable:
    def test_on_parabola(self):
        res = is_interpolable([T(1, 0.5, 1), T(0, 0, 0)], 1.0, tol=0.0)
        assert res.ok

    def test_violation_reported(self):
        res = is_interpolable([T(0, 0, 0), T(1, 0, 1)], 1.0, tol=0.0)
        assert not res.ok
        assert (res.i, res.j, res.value) == (1, 0, -0.5)

    def test_singleton_and_empty(self):
        assert is_interpolable([T(5, 1, 2)], 1.0, tol=0.0).ok
        assert is_interpolable([], 1.0).ok

    def test_negative_tol(self):
        with pytest.raises(ValueError):
            is_interpolable([T(5, 1, 2)], 1.0, tol=-1.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 6), st.integers(2, 8), st.integers(0, 2**31 - 1))
    def test_samples_of_smooth_convex_function(self, d, count, seed):
        q = PSDQuadratic(d, seed)
        rng = np.random.default_rng(seed)
        triples = [q.triple(rng.standard_normal(d) * 3) for _ in range(count)]
        assert is_interpolable(triples, q.L).ok
        Q = q_matrix(triples, q.L)
        assert np.all(Q >= -1e-9 * (1 + np.max(np.abs(Q))))

    def test_history_rejects_bad_data(self):
        with pytest.raises(ValueError):
            History(1.0, [T(0, 0, 0), T(1, 0, 1)])
        h = History(1.0, [T(1, 0.5, 1)])
        assert len(h.append(T(0, 0, 0), validate=True)) == 2
        with pytest.raises(AttributeError):
            h.L = 2.0


class TestAuxResidual:
    def test_at_minimizer(self):
        x0, xs = np.array([3.0, -1.0]), np.array([1.0, 1.0])
        cert = AuxCertificate(xs, 5.0)
        assert aux_residual(cert, x0, xs, 2.0, 2.0, L=2.0) == pytest.approx(8.0)

    def test_quadratic_first_step(self):
        cert = AuxCertificate([-1.0], 2.0)
        assert aux_residual(cert, [1.0], [0.0], 0.0, 0.0, 1.0) == 0.0

    def test_bad_certificate(self):
        with pytest.raises(ValueError):
            AuxCertificate([0.0], 0.0)
        with pytest.raises(ValueError):
            AuxCertificate([0.0], 1.0, kind="other")

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 5), st.integers(0, 2**31 - 1), st.floats(1.0, 4.0))
    def test_initial_auxiliary_vector(self, d, seed, inflate):
        q = PSDQuadratic(d, seed, rank=max(1, d - 1))
        L = q.L * inflate
        f0, g0 = q.evaluate(q.x0)
        z1 = q.x0 - 2.0 * g0 / L
        target = f0 - float(g0 @ g0) / (2 * L)
        H = aux_residual(AuxCertificate(z1, 2.0), q.x0, q.x_star, q.f_star, target, L)
        assert H >= -1e-10 * (1 + L * float(q.x0 @ q.x0))


@pytest.mark.parametrize("mode", ["ogm", "spgm"])
@pytest.mark.parametrize("seed", range(4))
def test_certificate_chain_along_a_run(mode, seed):
    # z_{n+1} certifies x_n with pre-rate tau_n, and with rate tau_N at the end
    q = PSDQuadratic(5, seed, rank=3)
    N = 6
    st_ = SPGMStepper(q.L, q.x0, N, mode=mode)
    xs = []
    while st_.n <= N and st_.terminal is None:
        xs.append(st_.x.copy())
        st_.tell(*q.evaluate(st_.x))
    scale = q.L * float(q.x0 @ q.x0)
    for n, x in enumerate(xs):
        f, g = q.evaluate(x)
        final = n == N
        target = f if final else f - float(g @ g) / (2 * q.L)
        cert = AuxCertificate(st_.zs[n], st_.taus[n], "rate" if final else "pre-rate")
        assert aux_residual(cert, q.x0, q.x_star, q.f_star, target, q.L) >= -1e-9 * scale
    # the half-step certificate produced by the subproblem
    for r in st_.rounds:
        if r.z_half is None or not np.isfinite(r.tau_half):
            continue
        cert = AuxCertificate(r.z_half, r.tau_half)
        assert aux_residual(cert, q.x0, q.x_star, q.f_star, r.f_half_plus, q.L) >= -1e-8 * scale
