import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from l2tl.policy import (BaselineState, PolicyParams, action_space_size, alpha_of,
                         init_policy, load_policy, log_prob_of, policy_optimizer,
                         rank_source_classes, reinforce_gradient, reinforce_update, sample_action,
                         sample_actions, save_policy, update_baseline, weight_of,
                         write_ranking_csv)


class TestInit:
    def test_uniform_bins(self):
        p = init_policy(10, n=11)
        np.testing.assert_allclose(p.class_probs(), 1 / 11)
        np.testing.assert_allclose(p.alpha_probs(), 1 / 100)

    def test_two_equiprobable_actions(self):
        p = init_policy(1, n=2, n_alpha=1)
        assert action_space_size(1, 2, 1) == 2
        np.testing.assert_allclose(p.class_probs(), [[0.5, 0.5]])

    def test_sample_frequency(self):
        n, draws = 11, 100_000
        bins, _ = sample_actions(init_policy(1, n=n), draws, np.random.default_rng(0))
        freq = np.bincount(bins[:, 0], minlength=n) / draws
        sigma = math.sqrt((1 / n) * (1 - 1 / n) / draws)
        assert np.all(np.abs(freq - 1 / n) <= 3 * sigma * 1.5)

    def test_invalid_sizes(self):
        with pytest.raises(ValueError):
            init_policy(0)
        with pytest.raises(ValueError):
            init_policy(2, n=1)


class TestGrids:
    def test_weight_values(self):
        assert weight_of(3, 11) == pytest.approx(0.3)
        assert [weight_of(k, 11) for k in (0, 10)] == [0.0, 1.0]

    def test_default_grid(self):
        np.testing.assert_allclose([weight_of(k, 11) for k in range(11)],
                                   np.linspace(0.0, 1.0, 11), atol=1e-15)

    def test_weight_out_of_range(self):
        with pytest.raises(ValueError):
            weight_of(11, 11)

    def test_alpha_values(self):
        assert alpha_of(33, 100, 0.5) == pytest.approx(0.166667, abs=1e-6)
        assert alpha_of(0, 100, 0.5) == 0.0
        assert alpha_of(99, 100, 0.5) == 0.5
        assert alpha_of(0, 1, 0.5) == 0.5

    def test_alpha_out_of_range(self):
        with pytest.raises(ValueError):
            alpha_of(-1, 10, 0.5)

    @given(st.integers(2, 200))
    def test_monotone(self, n):
        w = [weight_of(k, n) for k in range(n)]
        a = [alpha_of(k, n, 0.7) for k in range(n)]
        assert all(x < y for x, y in zip(w, w[1:]))
        assert all(x < y for x, y in zip(a, a[1:]))
        assert 0.0 <= min(a) and max(a) <= 0.7


class TestSampling:
    def test_uniform_log_prob(self):
        a = sample_action(init_policy(10, 11, 100), np.random.default_rng(0))
        assert a.log_prob == pytest.approx(10 * math.log(1 / 11) + math.log(1 / 100))

    def test_pinned_row(self):
        logits = np.zeros((3, 5))
        logits[1, 4] = 1000.0
        p = PolicyParams(logits, np.zeros(2))
        rng = np.random.default_rng(0)
        assert all(sample_action(p, rng).weight_bins[1] == 4 for _ in range(200))

    def test_seeded(self):
        p = init_policy(4)
        a = sample_action(p, np.random.default_rng(3))
        b = sample_action(p, np.random.default_rng(3))
        np.testing.assert_array_equal(a.weight_bins, b.weight_bins)
        assert a.alpha_bin == b.alpha_bin and a.log_prob == b.log_prob

    @settings(max_examples=50)
    @given(st.integers(0, 10_000))
    def test_log_prob_consistent(self, seed):
        rng = np.random.default_rng(seed)
        p = PolicyParams(rng.normal(size=(3, 4)), rng.normal(size=5))
        a = sample_action(p, rng)
        direct = np.log(p.class_probs()[np.arange(3), a.weight_bins]).sum() + np.log(
            p.alpha_probs()[a.alpha_bin])
        assert a.log_prob == pytest.approx(direct, rel=1e-12)
        np.testing.assert_allclose(p.class_probs().sum(axis=1), 1.0, atol=1e-9)
        assert abs(p.alpha_probs().sum() - 1.0) < 1e-9

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(2, 4))
        a = PolicyParams(logits, np.zeros(3))
        b = PolicyParams(logits + np.array([[5.0], [-3.0]]), np.zeros(3) + 7.0)
        np.testing.assert_allclose(a.class_probs(), b.class_probs(), rtol=1e-12)
        fa = np.bincount(sample_actions(a, 50_000, np.random.default_rng(1))[0][:, 0], minlength=4)
        fb = np.bincount(sample_actions(b, 50_000, np.random.default_rng(2))[0][:, 0], minlength=4)
        # two-sample chi-square with 3 degrees of freedom, 0.1% critical value 16.27
        expected = (fa + fb) / 2
        chi2 = float((((fa - expected) ** 2 + (fb - expected) ** 2) / expected).sum())
        assert chi2 < 16.27


class TestBaseline:
    def test_first_update(self):
        assert update_baseline(BaselineState(0.0, 0.05), 1.0).b == pytest.approx(0.05)

    def test_fixed_point(self):
        assert update_baseline(BaselineState(0.7, 0.05), 0.7).b == pytest.approx(0.7)

    @given(st.floats(0, 10), st.floats(0.001, 1.0), st.integers(1, 300))
    def test_closed_form(self, r, gamma, t):
        state = BaselineState(0.0, gamma)
        for _ in range(t):
            state = update_baseline(state, r)
        assert state.b == pytest.approx(r * (1 - (1 - gamma) ** t), rel=1e-9, abs=1e-12)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=50), st.floats(0.01, 1.0))
    def test_bounded_by_history(self, rewards, gamma):
        state = BaselineState(0.0, gamma)
        for r in rewards:
            state = update_baseline(state, r)
            assert 0.0 <= state.b <= max(rewards) + 1e-12

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            update_baseline(BaselineState(), float("nan"))

    def test_gamma_range(self):
        with pytest.raises(ValueError):
            BaselineState(0.0, 0.0)


class TestReinforce:
    def test_zero_advantage_keeps_policy(self):
        p = init_policy(3, 4, 5)
        a = sample_action(p, np.random.default_rng(0))
        new, _ = reinforce_update(p, [a], [0.4], 0.4, policy_optimizer(p), lr=0.1)
        np.testing.assert_array_equal(new.class_logits, p.class_logits)
        np.testing.assert_array_equal(new.alpha_logits, p.alpha_logits)

    def test_positive_advantage_raises_probability(self):
        p = init_policy(3, 4, 5)
        a = sample_action(p, np.random.default_rng(0))
        new, _ = reinforce_update(p, [a], [1.0], 0.2, policy_optimizer(p), lr=0.01)
        assert log_prob_of(new, a.weight_bins, a.alpha_bin) > a.log_prob

    def test_empty_batch(self):
        p = init_policy(2)
        with pytest.raises(ValueError):
            reinforce_gradient(p, [], [])

    def test_two_arm_bandit(self):
        p = init_policy(1, n=2, n_alpha=1)
        bins, alpha = sample_actions(p, 100_000, np.random.default_rng(0))
        rewards = (bins[:, 0] == 0).astype(float)
        g, _ = reinforce_gradient(p, (bins, alpha), rewards)
        # E[R] = p0, so dE/dlogit0 = p0 (1 - p0) = 0.25 and dE/dlogit1 = -0.25
        np.testing.assert_allclose(g[0], [0.25, -0.25], rtol=0.05)

    def test_frozen_class_logits(self):
        p = init_policy(2, 3, 4)
        a = sample_action(p, np.random.default_rng(1))
        new, state = reinforce_update(p, [a], [1.0], 0.0, policy_optimizer(p), 0.1,
                                      update_class_logits=False)
        np.testing.assert_array_equal(new.class_logits, p.class_logits)
        assert not np.array_equal(new.alpha_logits, p.alpha_logits)
        assert np.all(state.slots[0] == 0) and np.all(state.slots[1] == 0)

    def test_per_sample_matches_mean(self):
        rng = np.random.default_rng(4)
        p = PolicyParams(rng.normal(size=(2, 3)), rng.normal(size=4))
        bins, alpha = sample_actions(p, 20, rng)
        adv = rng.normal(size=20)
        gc, ga = reinforce_gradient(p, (bins, alpha), adv)
        pc, pa = reinforce_gradient(p, (bins, alpha), adv, per_sample=True)
        np.testing.assert_allclose(pc.mean(axis=0), gc, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(pa.mean(axis=0), ga, rtol=1e-12, atol=1e-15)


class TestActionSpace:
    def test_small(self):
        assert action_space_size(1, 1, 1) == 1

    def test_enumeration(self):
        count = sum(1 for _ in itertools.product(range(2), range(2), range(3)))
        assert action_space_size(2, 2, 3) == count == 12

    def test_default_is_exact(self):
        assert action_space_size(10, 11, 100) == 100 * 11 ** 10

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
    def test_matches_enumeration(self, c, n, na):
        assert action_space_size(c, n, na) == sum(
            1 for _ in itertools.product(*[range(n)] * c, range(na)))

    def test_huge_is_python_int(self):
        size = action_space_size(1000, 11, 100)
        assert isinstance(size, int) and size == 100 * 11 ** 1000


class TestRanking:
    def test_degenerate(self):
        logits = np.full((4, 11), -1000.0)
        logits[0, 10] = 1000.0
        logits[1:, 0] = 1000.0
        ranking = rank_source_classes(PolicyParams(logits, np.zeros(1)), 1000,
                                      np.random.default_rng(0))
        assert ranking[0] == (0, 1.0)
        assert [c for c, _ in ranking] == [0, 1, 2, 3]

    def test_uniform_means(self):
        ranking = rank_source_classes(init_policy(5), 10_000, np.random.default_rng(0))
        # std of a uniform draw from {0, 0.1, ..., 1} is 0.3162
        sigma = 0.31623 / math.sqrt(10_000)
        assert sorted(c for c, _ in ranking) == list(range(5))
        assert all(abs(m - 0.5) <= 3 * sigma for _, m in ranking)

    def test_csv(self, tmp_path):
        write_ranking_csv(tmp_path / "r.csv", [(2, 0.9), (0, 0.1)], ["a", "b", "c"])
        assert (tmp_path / "r.csv").read_text().splitlines() == [
            "class_id,class_name,mean_weight,rank", "2,c,0.900000,1", "0,a,0.100000,2"]


class TestPolicyCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        p = PolicyParams(rng.normal(size=(3, 11)), rng.normal(size=100), beta=0.25)
        save_policy(tmp_path / "p", p)
        back = load_policy(tmp_path / "p")
        assert back.beta == 0.25
        np.testing.assert_array_equal(back.class_logits, p.class_logits)
        np.testing.assert_array_equal(back.alpha_logits, p.alpha_logits)
