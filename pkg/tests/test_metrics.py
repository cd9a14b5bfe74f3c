import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from l2tl.metrics import MetricError, auc, mean_auc, reward, score_logits, top1_accuracy
from l2tl.model import ModelConfig, TwoHeadModel


def brute_force_auc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


class TestTop1:
    def test_all_correct(self):
        assert top1_accuracy(np.eye(3), [0, 1, 2]) == 1.0

    def test_two_thirds(self):
        logits = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        assert top1_accuracy(logits, [0, 1, 0]) == pytest.approx(2 / 3)

    def test_tie_goes_to_lowest_index(self):
        assert top1_accuracy(np.array([[0.0, 0.0]]), [1]) == 0.0

    def test_empty(self):
        with pytest.raises(MetricError):
            top1_accuracy(np.zeros((0, 2)), [])

    # integer-valued logits keep the shift exact, including ties
    @given(hnp.arrays(np.float64, (6, 4), elements=st.integers(-100, 100).map(float)),
           hnp.arrays(np.float64, (6, 1), elements=st.integers(-1000, 1000).map(float)),
           hnp.arrays(np.int64, 6, elements=st.integers(0, 3)))
    def test_row_shift_invariance(self, logits, shift, labels):
        assert top1_accuracy(logits + shift, labels) == top1_accuracy(logits, labels)


class TestAuc:
    def test_separated(self):
        assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_equal(self):
        assert auc([0.3] * 5, [0, 1, 0, 1, 1]) == 0.5

    def test_hand_example(self):
        scores, labels = [0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]
        assert auc(scores, labels) == brute_force_auc(scores, labels) == 0.75

    def test_single_class(self):
        with pytest.raises(MetricError):
            auc([0.1, 0.2], [1, 1])

    def test_oracle_on_random_instances(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(200):
            m = int(rng.integers(2, 51))
            # coarse grid makes ties frequent
            scores = rng.integers(0, 6, size=m) / 5.0
            labels = rng.integers(0, 2, size=m)
            labels[0], labels[1] = 0, 1
            worst = max(worst, abs(auc(scores, labels) - brute_force_auc(scores, labels)))
        assert worst <= 1e-12

    @settings(max_examples=100)
    @given(hnp.arrays(np.float64, st.integers(2, 30),
                      elements=st.integers(-50, 50).map(lambda v: v / 10)), st.data())
    def test_monotone_transform_invariance(self, scores, data):
        labels = data.draw(hnp.arrays(np.int64, scores.size, elements=st.integers(0, 1)))
        labels[0], labels[-1] = 0, 1
        assert auc(scores ** 3 + scores, labels) == auc(scores, labels)

    @settings(max_examples=100)
    @given(st.integers(2, 30), st.integers(0, 10_000))
    def test_complement(self, m, seed):
        rng = np.random.default_rng(seed)
        scores = rng.permutation(m).astype(float)
        labels = rng.integers(0, 2, m)
        labels[0], labels[1] = 0, 1
        assert auc(scores, labels) + auc(-scores, labels) == pytest.approx(1.0, abs=1e-12)


class TestMeanAuc:
    def test_average(self):
        scores = np.array([[0.9, 0.5], [0.1, 0.5], [0.8, 0.5], [0.2, 0.5]])
        labels = np.array([[1, 1], [0, 0], [1, 0], [0, 1]])
        assert mean_auc(scores, labels) == pytest.approx(0.75)

    def test_skips_degenerate_column(self):
        scores = np.array([[0.9, 0.1], [0.1, 0.2]])
        labels = np.array([[1, 1], [0, 1]])
        assert mean_auc(scores, labels) == 1.0

    def test_all_degenerate(self):
        with pytest.raises(MetricError):
            mean_auc(np.zeros((2, 1)), np.ones((2, 1)))


class TestScoreAndReward:
    def test_auc_needs_two_classes(self):
        with pytest.raises(MetricError):
            score_logits("auc", np.zeros((4, 3)), [0, 1, 2, 0])

    def test_unknown_kind(self):
        with pytest.raises(MetricError):
            score_logits("f1", np.zeros((2, 2)), [0, 1])

    def test_perfect_model_reward(self):
        m = TwoHeadModel(ModelConfig((2,), 1, 2, hidden=(2,)))
        m.params["encoder.fc0.weight"].data[:] = np.eye(2)
        m.params["target_head.weight"].data[:] = np.eye(2) * 10
        x = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 0.1]])
        y = np.array([0, 1, 0])
        assert reward("top1-accuracy", m, (x, y)) == 1.0
        assert reward("mean-auc-over-labels", m, (x, y)) == 1.0
        assert reward("auc", m, (x, y)) == 1.0

    def test_reward_is_pure(self):
        m = TwoHeadModel(ModelConfig((3,), 2, 3))
        batch = (np.random.default_rng(0).normal(size=(20, 3)), np.arange(20) % 3)
        before = {k: v.data.copy() for k, v in m.params.items()}
        values = {reward(kind, m, batch) for kind in ["top1-accuracy"] * 3}
        assert len(values) == 1
        assert all(np.array_equal(before[k], m.params[k].data) for k in before)

    def test_empty_batch(self):
        m = TwoHeadModel(ModelConfig((3,), 2, 3))
        with pytest.raises(MetricError):
            reward("top1-accuracy", m, (np.zeros((0, 3)), np.zeros(0, dtype=int)))
