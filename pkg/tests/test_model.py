import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from softmoe.model import (
    ModelParams,
    draw_batch,
    forward,
    init_student,
    load_checkpoint,
    make_teacher,
    renormalize,
    save_checkpoint,
)
from softmoe.oracle import population_loss
from softmoe.rng import generator
from softmoe.verify import random_params


class TestTeacher:
    def test_canonical_rows(self):
        t = make_teacher(2, 6)
        np.testing.assert_array_equal(np.vstack([t.Vstar, t.Wstar]), np.eye(6)[:4])

    def test_random_orthogonal_gram(self):
        t = make_teacher(3, 100, "random_orthogonal", seed=7)
        np.testing.assert_allclose(t.gram(), np.eye(6), atol=1e-12)
        assert not np.allclose(t.Vstar, np.eye(100)[:3])

    def test_seeded_rotation_is_deterministic(self):
        a = make_teacher(2, 10, "random_orthogonal", seed=3)
        b = make_teacher(2, 10, "random_orthogonal", seed=3)
        c = make_teacher(2, 10, "random_orthogonal", seed=4)
        np.testing.assert_array_equal(a.Vstar, b.Vstar)
        assert not np.array_equal(a.Vstar, c.Vstar)

    def test_rejects_too_many_teachers(self):
        with pytest.raises(ValueError):
            make_teacher(4, 7)
        with pytest.raises(ValueError):
            make_teacher(1, 4, mode="diagonal")

    def test_rotation_invariance_of_loss(self):
        d = 8
        rot = make_teacher(2, d, "random_orthogonal", seed=5)
        q, r = np.linalg.qr(generator(5, "teacher").standard_normal((d, d)))
        q = q * np.sign(np.diag(r))
        np.testing.assert_allclose(np.eye(d)[:2] @ q.T, rot.Vstar, atol=1e-15)
        p = random_params(3, d, seed=1)
        moved = ModelParams.from_rows(p.V @ q.T, p.W @ q.T)
        assert population_loss(moved, rot) == pytest.approx(population_loss(p, make_teacher(2, d)), abs=1e-10)


class TestInit:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 10), st.integers(2, 60), st.integers(0, 2**32 - 1))
    def test_decoupled_rows(self, m, d, seed):
        p = init_student(m, d, seed)
        assert np.abs(np.sum(p.V * p.W, axis=1)).max() <= 1e-12
        np.testing.assert_allclose(p.norms_v, np.linalg.norm(p.V, axis=1), rtol=1e-12)
        np.testing.assert_allclose(p.norms_w, np.linalg.norm(p.W, axis=1), rtol=1e-12)

    def test_norm_concentration(self):
        for seed in range(100):
            b2 = init_student(8, 10_000, seed).norms_w ** 2
            assert np.all((b2 >= 0.9) & (b2 <= 1.1))

    def test_deterministic(self):
        a, b = init_student(5, 30, 11), init_student(5, 30, 11)
        np.testing.assert_array_equal(a.V, b.V)
        np.testing.assert_array_equal(a.W, b.W)
        assert not np.array_equal(a.V, init_student(5, 30, 12).V)

    def test_invalid(self):
        with pytest.raises(ValueError):
            init_student(0, 5, 0)
        with pytest.raises(ValueError):
            init_student(2, 1, 0)


class TestForward:
    def test_single_expert_example(self):
        p = ModelParams.from_rows([[0.0, 1.0]], [[3.0, 0.0]])
        assert forward(p, np.array([2.0, 0.0])) == pytest.approx(1.0, abs=1e-15)

    def test_zero_input(self):
        p = random_params(4, 7, seed=0)
        assert forward(p, np.zeros(7)) == 0.0

    def test_student_equal_teacher(self):
        t = make_teacher(2, 9, "random_orthogonal", seed=1)
        X = draw_batch(0, 100, 9, "aux").samples
        np.testing.assert_allclose(forward(t.as_params(), X), forward(t, X), atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            forward(random_params(2, 5, seed=0), np.ones(6))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0), st.floats(0.01, 100.0))
    def test_scale_invariance(self, seed, sv, sw):
        p = random_params(3, 6, seed=seed % 1000)
        scaled = ModelParams.from_rows(p.V * np.array([[sv], [1.0], [sw]]), p.W * sw)
        X = draw_batch(seed % 1000, 32, 6, "aux", 1).samples
        np.testing.assert_allclose(forward(scaled, X), forward(p, X), atol=1e-12)


class TestParams:
    def test_rejects_zero_rows_and_shape_mismatch(self):
        with pytest.raises(ValueError):
            ModelParams.from_rows([[0.0, 0.0]], [[1.0, 0.0]])
        with pytest.raises(ValueError):
            ModelParams.from_rows(np.ones((2, 3)), np.ones((3, 3)))

    def test_subset(self):
        p = random_params(4, 5, seed=0)
        s = p.subset([2, 0])
        np.testing.assert_array_equal(s.V, p.V[[2, 0]])
        np.testing.assert_array_equal(s.norms_w, p.norms_w[[2, 0]])


class TestRenormalize:
    def test_halves_row(self):
        p = ModelParams.from_rows([[2.0, 0.0]], [[0.0, 1.0]])
        q = renormalize(p, [1.0], [1.0])
        np.testing.assert_allclose(q.V, [[1.0, 0.0]])

    def test_identity_at_current_norms(self):
        p = random_params(3, 6, seed=2)
        q = renormalize(p, p.norms_v, p.norms_w)
        np.testing.assert_allclose(q.V, p.V, rtol=1e-15, atol=1e-15)
        np.testing.assert_allclose(q.W, p.W, rtol=1e-15, atol=1e-15)

    def test_direction_and_output_preserved(self):
        p = random_params(3, 6, seed=3)
        q = renormalize(p, np.full(3, 0.3), np.full(3, 7.0))
        cos = np.sum(q.Vbar * p.Vbar, axis=1)
        assert np.abs(cos - 1).max() <= 1e-15
        X = draw_batch(0, 50, 6, "aux").samples
        np.testing.assert_allclose(forward(q, X), forward(p, X), atol=1e-12)

    def test_rejects_nonpositive_targets(self):
        p = random_params(2, 4, seed=0)
        with pytest.raises(ValueError):
            renormalize(p, [1.0, 0.0], [1.0, 1.0])


class TestBatchAndCheckpoint:
    def test_batch_lineage(self):
        a = draw_batch(3, 10, 4, "data", 5)
        np.testing.assert_array_equal(a.samples, draw_batch(3, 10, 4, "data", 5).samples)
        assert not np.array_equal(a.samples, draw_batch(3, 10, 4, "data", 6).samples)
        assert not np.array_equal(a.samples, draw_batch(3, 10, 4, "prune", 5).samples)
        with pytest.raises(ValueError):
            draw_batch(0, 0, 4)

    def test_checkpoint_round_trip(self, tmp_path):
        p = random_params(3, 5, seed=9)
        save_checkpoint(tmp_path / "c.txt", p, 2, 9, 123)
        q, meta = load_checkpoint(tmp_path / "c.txt")
        np.testing.assert_array_equal(q.V, p.V)
        np.testing.assert_array_equal(q.W, p.W)
        assert meta == {"m": 3, "m_star": 2, "d": 5, "seed": 9, "step": 123}
