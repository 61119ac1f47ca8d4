import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from softmoe.hermite import sigmoid_profile
from softmoe.mc import mc_loss
from softmoe.model import ModelParams, draw_batch, expert_terms, he2, make_teacher
from softmoe.oracle import (
    SERIES,
    build_lambda_tables,
    loss_and_grad,
    population_grad,
    population_loss,
)
from softmoe.verify import fd_gradient, random_params

seeds = st.integers(0, 10_000)


def tangent_direction(params, rng):
    U = rng.standard_normal(params.V.shape)
    Q = rng.standard_normal(params.W.shape)
    U -= np.sum(U * params.Vbar, axis=1, keepdims=True) * params.Vbar
    Q -= np.sum(Q * params.Wbar, axis=1, keepdims=True) * params.Wbar
    return U, Q


class TestLambdaTables:
    def test_tables_match_raw_moment_definitions(self):
        prof = sigmoid_profile(12)
        c = prof.coeffs
        K = prof.truncation_order
        p = random_params(2, 6, seed=4)
        t = make_teacher(1, 6)
        tab = build_lambda_tables(p, t, prof)
        for kind in range(1, 6):
            sk, sl, a, b = SERIES[kind]
            for teacher, table in ((False, tab.lam), (True, tab.lamhat)):
                for i, j in [(0, 0), (0, 1), (1, 0)] if not teacher else [(0, 0), (1, 0)]:
                    want = sum(
                        c[k + sk] * c[l + sl] / (math.factorial(k) * math.factorial(l))
                        * tab.raw_moment(i, j, (k, l, a, b), teacher)
                        for k in range(K + 1)
                        for l in range(K + 1)
                    )
                    assert table[kind - 1][i, j] == pytest.approx(want, abs=1e-10)

    def test_transposed_kinds(self):
        tab = build_lambda_tables(random_params(4, 7, seed=2), make_teacher(2, 7))
        l1, l2, l3, l4, l5 = tab.lam
        np.testing.assert_allclose(l4, l3.T, atol=1e-12)
        np.testing.assert_allclose(l1, l1.T, atol=1e-12)
        np.testing.assert_allclose(l5, l5.T, atol=1e-12)
        np.testing.assert_allclose(tab.gram, tab.gram.T, atol=1e-12)

    def test_decoupled_diagonal(self):
        prof = sigmoid_profile()
        tab = build_lambda_tables(make_teacher(3, 8).as_params(), make_teacher(1, 8), prof)
        K = prof.truncation_order
        want = 6 * sum(prof.coeffs[k + 1] ** 2 / math.factorial(k) for k in range(K + 1))
        np.testing.assert_allclose(np.diag(tab.lam[0]), want, rtol=1e-12)

    def test_orthogonal_configuration_zeroes_off_diagonal(self):
        p = make_teacher(3, 6).as_params()
        tab = build_lambda_tables(p, make_teacher(1, 6))
        off = ~np.eye(3, dtype=bool)
        for kind in range(5):
            assert np.abs(tab.lam[kind][off]).max() == 0.0

    def test_lamhat5_monte_carlo(self):
        p = random_params(2, 6, seed=8)
        t = make_teacher(2, 6, "random_orthogonal", seed=1)
        tab = build_lambda_tables(p, t)
        X = draw_batch(0, 10**6, 6, "aux", 3).samples
        _, u, g, _ = expert_terms(p, X)
        _, us, gs, _ = expert_terms(t, X)
        for i in range(2):
            for j in range(2):
                vals = g[:, i] * gs[:, j] * he2(u[:, i]) * he2(us[:, j])
                se = vals.std(ddof=1) / math.sqrt(vals.size)
                assert abs(vals.mean() - tab.lamhat[4][i, j]) <= 3 * se


class TestLoss:
    def test_zero_at_teacher(self):
        t = make_teacher(3, 8, "random_orthogonal", seed=2)
        assert abs(population_loss(t.as_params(), t)) <= 1e-9

    def test_orthogonal_closed_form(self):
        prof = sigmoid_profile()
        sq = sum(prof.coeffs[k] ** 2 / math.factorial(k) for k in range(prof.truncation_order + 1))
        for m, ms in [(1, 1), (3, 2), (2, 3)]:
            d = 2 * (m + ms)
            rows = np.eye(d)
            p = ModelParams.from_rows(rows[2 * ms : 2 * ms + m], rows[2 * ms + m : 2 * ms + 2 * m])
            assert population_loss(p, make_teacher(ms, d)) == pytest.approx(3 * (m + ms) * sq, rel=1e-12)

    def test_monte_carlo_agreement(self):
        p = random_params(2, 8, seed=0)
        t = make_teacher(1, 8)
        est = mc_loss(p, t, draw_batch(1, 10**7, 8, "aux", 4))
        assert abs(est.value - population_loss(p, t)) <= 3 * est.std_error

    @settings(max_examples=25, deadline=None)
    @given(seeds, st.integers(1, 4), st.integers(1, 2))
    def test_nonnegative(self, seed, m, ms):
        assert population_loss(random_params(m, 6, seed), make_teacher(ms, 6)) >= -1e-9

    @settings(max_examples=15, deadline=None)
    @given(seeds, st.randoms(use_true_random=False))
    def test_relabeling_symmetry(self, seed, rnd):
        p = random_params(4, 6, seed)
        t = make_teacher(2, 6)
        perm = list(range(4))
        rnd.shuffle(perm)
        q = ModelParams.from_rows(p.V[perm], p.W[perm])
        assert population_loss(q, t) == pytest.approx(population_loss(p, t), abs=1e-12)

    def test_truncation_stability(self):
        for seed in range(5):
            p = random_params(3, 6, seed)
            t = make_teacher(2, 6)
            a = population_loss(p, t, sigmoid_profile())
            b = population_loss(p, t, sigmoid_profile(48))
            assert abs(a - b) <= 1e-9

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            population_loss(random_params(2, 6, 0), make_teacher(1, 8))


class TestGradient:
    @settings(max_examples=20, deadline=None)
    @given(seeds, st.integers(1, 4), st.integers(1, 3))
    def test_exact_tangency(self, seed, m, ms):
        p = random_params(m, 7, seed)
        gv, gw = population_grad(p, make_teacher(ms, 7))
        assert np.abs(np.sum(gv * p.V, axis=1)).max() <= 1e-12
        assert np.abs(np.sum(gw * p.W, axis=1)).max() <= 1e-12

    def test_stationary_at_teacher(self):
        t = make_teacher(2, 8, "random_orthogonal", seed=3)
        gv, gw = population_grad(t.as_params(), t)
        assert max(np.linalg.norm(gv), np.linalg.norm(gw)) <= 1e-8

    def test_finite_differences(self):
        t = make_teacher(1, 8)
        for c in range(5):
            p = random_params(2, 8, seed=100, index=c)
            gv, gw = population_grad(p, t)
            fv, fw = fd_gradient(p, t)
            scale = max(np.abs(fv).max(), np.abs(fw).max())
            assert np.abs(gv - fv).max() / scale <= 1e-5
            assert np.abs(gw - fw).max() / scale <= 1e-5

    def test_router_norm_scaling_of_expert_gradient_is_wrong(self):
        t = make_teacher(1, 8)
        p = random_params(2, 8, seed=100, index=0)
        _, gw = population_grad(p, t, w_scale="v")
        _, fw = fd_gradient(p, t)
        assert np.abs(gw - fw).max() / np.abs(fw).max() > 1e-2

    def test_directional_derivatives(self):
        rng = np.random.default_rng(0)
        p = random_params(3, 6, seed=7)
        t = make_teacher(2, 6)
        loss, (gv, gw) = loss_and_grad(p, t)
        assert loss == pytest.approx(population_loss(p, t), abs=1e-14)
        eps = 1e-5
        for _ in range(20):
            U, Q = tangent_direction(p, rng)
            lp = population_loss(ModelParams.from_rows(p.V + eps * U, p.W + eps * Q), t)
            lm = population_loss(ModelParams.from_rows(p.V - eps * U, p.W - eps * Q), t)
            fd = (lp - lm) / (2 * eps)
            an = np.sum(gv * U) + np.sum(gw * Q)
            assert an == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_rejects_unknown_scaling(self):
        with pytest.raises(ValueError):
            population_grad(random_params(1, 4, 0), make_teacher(1, 4), w_scale="x")
