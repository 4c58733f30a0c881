from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

import oracles
from slidenav.core import DeterministicRng, EngineConfig
from slidenav.memory import (
    ACTION_DECAY,
    ACTION_UPDATE,
    ACTION_WARMUP,
    batch_score_surprise,
    forward,
    gelu,
    huber_loss,
    init_memory,
    load_state,
    materialize_gradients,
    observe_tile,
    save_state,
    score_surprise,
    summary_stats,
)


def fresh_state(d=6, hidden=5, seed=3, label="mem"):
    cfg = EngineConfig(d=d, hidden=hidden)
    return init_memory(cfg, DeterministicRng(seed, label)), cfg


def states_equal(a, b) -> bool:
    return (
        np.array_equal(a.w1, b.w1)
        and np.array_equal(a.b1, b.b1)
        and np.array_equal(a.w2, b.w2)
        and np.array_equal(a.b2, b.b2)
        and a.step_count == b.step_count
        and a.threshold == b.threshold
        and a.warmup_scores == b.warmup_scores
        and a.surprise_history == b.surprise_history
    )


class TestInit:
    def test_same_seed_bit_identical(self):
        a, _ = fresh_state(seed=9)
        b, _ = fresh_state(seed=9)
        assert states_equal(a, b)

    def test_bounds_analytic(self):
        cfg = EngineConfig(d=4, hidden=4)
        st = init_memory(cfg, DeterministicRng(1, "b"))
        for arr in (st.w1, st.b1, st.w2, st.b2):
            assert np.all(np.abs(arr) <= 0.5)

    def test_empirical_mean_near_zero(self):
        cfg = EngineConfig(d=1000, hidden=1000)
        st = init_memory(cfg, DeterministicRng(5, "m"))
        bound = 1.0 / math.sqrt(1000)
        se = (bound / math.sqrt(3.0)) / math.sqrt(st.w1.size)
        assert abs(st.w1.mean()) <= 3 * se

    def test_threshold_absent_initially(self):
        st, _ = fresh_state()
        assert st.threshold is None and st.step_count == 0


class TestForward:
    def test_zero_parameters_give_zero_output(self):
        st, _ = fresh_state()
        for arr in (st.w1, st.b1, st.w2, st.b2):
            arr[...] = 0.0
        out, hid = forward(st, np.ones(6))
        assert np.all(out == 0.0) and np.all(hid == 0.0)

    def test_gelu_limits(self):
        assert gelu(np.array([0.0]))[0] == 0.0
        x = np.array([30.0])
        assert gelu(x)[0] == pytest.approx(30.0, rel=1e-12)
        assert gelu(np.array([-30.0]))[0] == pytest.approx(0.0, abs=1e-12)

    def test_matches_triple_loop_oracle(self):
        st, _ = fresh_state(d=4, hidden=4, seed=21)
        z = DeterministicRng(2, "z").generator().standard_normal(4)
        out, hid = forward(st, z)
        oout, ohid = oracles.naive_forward(st.w1, st.b1, st.w2, st.b2, z)
        np.testing.assert_allclose(out, oout, rtol=0, atol=1e-12)
        np.testing.assert_allclose(hid, ohid, rtol=0, atol=1e-12)

    def test_length_mismatch_rejected(self):
        st, _ = fresh_state()
        with pytest.raises(ValueError):
            forward(st, np.ones(5))


class TestHuberLoss:
    def test_zero_residual(self):
        loss, grad = huber_loss(np.ones(4), np.ones(4), 1.0)
        assert loss == 0.0 and np.all(grad == 0.0)

    def test_quadratic_branch_analytic(self):
        loss, grad = huber_loss(np.array([0.5]), np.array([0.0]), 1.0)
        assert loss == pytest.approx(0.125, abs=0)
        assert grad[0] == pytest.approx(0.5, abs=0)

    def test_both_branches_analytic(self):
        loss, grad = huber_loss(np.array([3.0, -0.2]), np.array([0.0, 0.0]), 1.0)
        assert loss == pytest.approx((2.5 + 0.02) / 2, rel=1e-15)
        assert grad[0] == pytest.approx(0.5, rel=1e-15)
        assert grad[1] == pytest.approx(-0.1, rel=1e-15)

    def test_nonpositive_delta_rejected(self):
        with pytest.raises(ValueError):
            huber_loss(np.ones(2), np.zeros(2), 0.0)

    def test_matches_scalar_oracle(self):
        gen = DeterministicRng(4, "h").generator()
        out = gen.standard_normal(16) * 2
        tgt = gen.standard_normal(16)
        loss, grad = huber_loss(out, tgt, 1.0)
        oloss, ograd = oracles.naive_huber(out, tgt, 1.0)
        assert loss == pytest.approx(oloss, rel=1e-14)
        np.testing.assert_allclose(grad, ograd, rtol=1e-14)


class TestScoreSurprise:
    def test_exact_reconstruction_gives_zero_sigma(self):
        st, _ = fresh_state()
        z = np.zeros(6)
        for arr in (st.w1, st.b1, st.w2):
            arr[...] = 0.0
        st.b2[...] = 0.0  # output == z == 0
        res = score_surprise(st, z, 1.0)
        assert res.sigma == 0.0
        assert np.all(res.residual_grad == 0.0)

    def test_factored_identity_matches_materialized(self):
        for d, hidden in ((4, 4), (16, 16), (64, 64)):
            for trial in range(50):
                st, _ = fresh_state(d=d, hidden=hidden, seed=trial, label=f"fi{d}")
                z = DeterministicRng(trial, f"z{d}").generator().standard_normal(d) * 1.5
                res = score_surprise(st, z, 1.0)
                blocks = materialize_gradients(st, z, 1.0)
                norm = oracles.frobenius_norm_of(blocks)
                assert res.sigma == pytest.approx(norm, rel=1e-6)

    def test_matches_finite_difference_oracle(self):
        st, _ = fresh_state(d=6, hidden=6, seed=8, label="fd")
        z = DeterministicRng(9, "fdz").generator().standard_normal(6)
        res = score_surprise(st, z, 1.0)
        fd = oracles.finite_difference_grad_norm(st.w1, st.b1, st.w2, st.b2, z, 1.0)
        assert res.sigma == pytest.approx(fd, rel=1e-4)

    def test_matches_scalar_loop_gradient(self):
        st, _ = fresh_state(d=5, hidden=7, seed=2, label="sl")
        z = DeterministicRng(3, "slz").generator().standard_normal(5) * 2
        blocks = materialize_gradients(st, z, 1.0)
        ref = oracles.naive_full_gradient(st.w1, st.b1, st.w2, st.b2, z, 1.0)
        for name in ("w1", "b1", "w2", "b2"):
            np.testing.assert_allclose(blocks[name], ref[name], rtol=1e-10, atol=1e-13)

    def test_purity_bit_compare(self):
        st, _ = fresh_state()
        before = st.copy()
        z = DeterministicRng(1, "p").generator().standard_normal(6)
        r1 = score_surprise(st, z, 1.0)
        r2 = score_surprise(st, z, 1.0)
        assert states_equal(st, before)
        assert r1.sigma == r2.sigma

    def test_batch_matches_sequential(self):
        st, _ = fresh_state(d=12, hidden=9, seed=6, label="bt")
        feats = DeterministicRng(7, "btz").generator().standard_normal((40, 12))
        batched = batch_score_surprise(st, feats, 1.0, chunk=16)
        for i in range(40):
            assert batched[i] == pytest.approx(
                score_surprise(st, feats[i], 1.0).sigma, rel=1e-12
            )


class TestObserveTile:
    def test_warmup_actions_and_threshold_transition(self):
        cfg = EngineConfig(d=6, hidden=5, t_w=2)
        st = init_memory(cfg, DeterministicRng(1, "w"))
        gen = DeterministicRng(2, "wz").generator()
        _, a1 = observe_tile(st, gen.standard_normal(6), cfg)
        assert a1 == ACTION_WARMUP and st.threshold is None
        _, a2 = observe_tile(st, gen.standard_normal(6), cfg)
        assert a2 == ACTION_WARMUP
        scores = np.asarray(st.warmup_scores)
        mu = scores.mean()
        expected = mu + cfg.lam * np.sqrt(np.mean((scores - mu) ** 2))
        assert st.threshold == expected

    def test_decay_is_exactly_multiplicative(self):
        cfg = EngineConfig(d=6, hidden=5, t_w=2)
        st = init_memory(cfg, DeterministicRng(1, "d"))
        gen = DeterministicRng(2, "dz").generator()
        for _ in range(2):
            observe_tile(st, gen.standard_normal(6), cfg)
        st.threshold = float("inf")  # force the decay branch
        before = st.copy()
        _, action = observe_tile(st, gen.standard_normal(6), cfg)
        assert action == ACTION_DECAY
        for name in ("w1", "b1", "w2", "b2"):
            assert np.array_equal(getattr(st, name), getattr(before, name) * 0.999)

    def test_clipped_step_delta_norm(self):
        cfg = EngineConfig(d=6, hidden=5, t_w=1)
        st = init_memory(cfg, DeterministicRng(1, "c"))
        observe_tile(st, np.zeros(6), cfg)
        st.threshold = 0.0
        base = DeterministicRng(2, "cz").generator().standard_normal(6)
        scale = 1.0
        while score_surprise(st, base * scale, cfg.huber_delta).sigma <= 2 * cfg.clip:
            scale *= 1.5
        z = base * scale
        sigma = score_surprise(st, z, cfg.huber_delta).sigma
        assert sigma > 2 * cfg.clip
        before = st.copy()
        _, action = observe_tile(st, z, cfg)
        assert action == ACTION_UPDATE
        delta_sq = sum(
            float(((getattr(st, n) - getattr(before, n)) ** 2).sum())
            for n in ("w1", "b1", "w2", "b2")
        )
        assert math.sqrt(delta_sq) == pytest.approx(cfg.lr * cfg.clip, abs=1e-9)

    def test_unclipped_step_matches_materialized_oracle(self):
        cfg = EngineConfig(d=6, hidden=5, t_w=1, lr=0.05)
        st = init_memory(cfg, DeterministicRng(4, "u"))
        z = DeterministicRng(5, "uz").generator().standard_normal(6) * 0.2
        res = score_surprise(st, z, cfg.huber_delta)
        assert res.sigma < cfg.clip
        blocks = materialize_gradients(st, z, cfg.huber_delta)
        before = st.copy()
        observe_tile(st, z, cfg)
        for name in ("w1", "b1", "w2", "b2"):
            np.testing.assert_allclose(
                getattr(st, name),
                getattr(before, name) - cfg.lr * blocks[name],
                rtol=1e-12,
                atol=1e-15,
            )

    def test_threshold_set_once_and_immutable(self):
        cfg = EngineConfig(d=4, hidden=4, t_w=3)
        st = init_memory(cfg, DeterministicRng(6, "t"))
        gen = DeterministicRng(7, "tz").generator()
        for _ in range(3):
            observe_tile(st, gen.standard_normal(4), cfg)
        frozen = st.threshold
        assert frozen is not None
        for _ in range(10):
            observe_tile(st, gen.standard_normal(4), cfg)
        assert st.threshold == frozen

    def test_zero_residual_post_warmup_decays(self):
        cfg = EngineConfig(d=4, hidden=4, t_w=1)
        st = init_memory(cfg, DeterministicRng(8, "z"))
        observe_tile(st, np.ones(4), cfg)
        for arr in (st.w1, st.b1, st.w2, st.b2):
            arr[...] = 0.0
        sigma, action = observe_tile(st, np.zeros(4), cfg)
        assert sigma == 0.0 and action == ACTION_DECAY

    def test_history_and_counter_bookkeeping(self):
        cfg = EngineConfig(d=4, hidden=4, t_w=3)
        st = init_memory(cfg, DeterministicRng(9, "h"))
        gen = DeterministicRng(10, "hz").generator()
        for _ in range(8):
            observe_tile(st, gen.standard_normal(4), cfg)
        assert st.step_count == 8
        assert len(st.surprise_history) == 8
        assert len(st.warmup_scores) == 3
        assert st.update_count + st.decay_count == 5


class TestSummaryStats:
    def test_constant_history(self):
        st, cfg = fresh_state()
        st.surprise_history = [1.0, 1.0, 1.0, 1.0]
        st.warmup_scores = [1.0, 1.0]
        st.step_count = 4
        st.threshold = 2.0
        mean, std, high = summary_stats(st)
        assert mean == 1.0 and std == 0.0 and high == 0.0

    def test_all_below_threshold(self):
        st, _ = fresh_state()
        st.surprise_history = [0.5, 0.4, 0.3]
        st.warmup_scores = [0.5]
        st.step_count = 3
        st.threshold = 0.6
        assert summary_stats(st)[2] == 0.0

    def test_matches_independent_recompute(self):
        st, _ = fresh_state()
        gen = DeterministicRng(11, "s").generator()
        hist = gen.uniform(0, 2, size=50).tolist()
        st.surprise_history = hist
        st.warmup_scores = hist[:10]
        st.step_count = 50
        st.threshold = 1.0
        mean, std, high = summary_stats(st)
        assert mean == pytest.approx(sum(hist) / 50, rel=1e-12)
        var = sum((x - sum(hist) / 50) ** 2 for x in hist) / 50
        assert std == pytest.approx(math.sqrt(var), rel=1e-12)
        assert high == pytest.approx(
            sum(1 for x in hist[10:] if x > 1.0) / 40, rel=1e-12
        )

    def test_threshold_never_set_high_fraction_zero(self):
        st, _ = fresh_state()
        st.surprise_history = [0.1, 9.9]
        st.warmup_scores = [0.1, 9.9]
        st.step_count = 2
        assert summary_stats(st)[2] == 0.0

    def test_empty_history_rejected(self):
        st, _ = fresh_state()
        with pytest.raises(ValueError):
            summary_stats(st)


class TestSnapshot:
    def test_round_trip(self, tmp_path):
        cfg = EngineConfig(d=5, hidden=4, t_w=2)
        st = init_memory(cfg, DeterministicRng(12, "snap"))
        gen = DeterministicRng(13, "snapz").generator()
        for _ in range(4):
            observe_tile(st, gen.standard_normal(5), cfg)
        path = tmp_path / "state.bin"
        save_state(st, path)
        loaded = load_state(path)
        assert states_equal(st, loaded)
        assert loaded.update_count == st.update_count
        assert loaded.decay_count == st.decay_count

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"XXXX123456")
        with pytest.raises(ValueError):
            load_state(path)
