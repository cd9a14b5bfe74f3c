import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from l2tl import autodiff as ad
from l2tl.autodiff import Tensor
from l2tl.datasets import (IdxFormatError, LabeledDataset, SyntheticSpec, load_idx,
                           make_synthetic_transfer_pair, sample_batch, split,
                           subsample_per_class, write_idx)
from l2tl.model import head_logits, per_example_loss
from l2tl.optim import apply_step, sgd_momentum_state


def _write(path, payload: bytes):
    path.write_bytes(payload)
    return path


def _images(tmp_path, dims, payload, name="img"):
    header = struct.pack(">HBB", 0, 0x08, len(dims)) + struct.pack(f">{len(dims)}I", *dims)
    return _write(tmp_path / name, header + payload)


def _labels(tmp_path, labels, name="lbl"):
    return _images(tmp_path, (len(labels),), bytes(labels), name)


class TestIdx:
    def test_hand_built_file(self, tmp_path):
        img = _write(tmp_path / "img", bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2])
                     + bytes([0, 255, 51, 102, 1, 2, 3, 4]))
        lbl = _labels(tmp_path, [1, 0])
        ds = load_idx(img, lbl)
        assert len(ds) == 2 and ds.feature_shape == (2, 2)
        np.testing.assert_allclose(ds.features[0], [[0.0, 1.0], [0.2, 0.4]])
        np.testing.assert_array_equal(ds.labels, [1, 0])

    def test_count_mismatch(self, tmp_path):
        img = _images(tmp_path, (3, 2), bytes(6))
        lbl = _labels(tmp_path, [0, 1])
        with pytest.raises(IdxFormatError, match="count mismatch"):
            load_idx(img, lbl)

    def test_zero_pixels(self, tmp_path):
        ds = load_idx(_images(tmp_path, (2, 3), bytes(6)), _labels(tmp_path, [0, 0]))
        assert np.all(ds.features == 0.0)

    def test_bad_magic(self, tmp_path):
        bad = _write(tmp_path / "bad", bytes([1, 0, 8, 1, 0, 0, 0, 0]))
        with pytest.raises(IdxFormatError) as exc:
            load_idx(bad, bad)
        assert exc.value.offset == 0

    def test_bad_dtype(self, tmp_path):
        bad = _write(tmp_path / "bad", bytes([0, 0, 0x0D, 1, 0, 0, 0, 0]))
        with pytest.raises(IdxFormatError) as exc:
            load_idx(bad, bad)
        assert exc.value.offset == 2

    def test_truncated_payload(self, tmp_path):
        img = _images(tmp_path, (2, 2, 2), bytes(5))
        with pytest.raises(IdxFormatError, match="truncated") as exc:
            load_idx(img, _labels(tmp_path, [0, 0]))
        assert exc.value.offset == 16 + 5

    def test_truncated_header(self, tmp_path):
        bad = _write(tmp_path / "bad", bytes([0, 0, 8, 3, 0, 0, 0, 2]))
        with pytest.raises(IdxFormatError, match="header"):
            load_idx(bad, bad)

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 4), st.integers(1, 4)),
                      elements=st.floats(0, 1)), st.data())
    def test_round_trip(self, tmp_path_factory, features, data):
        labels = data.draw(hnp.arrays(np.int64, features.shape[0], elements=st.integers(0, 9)))
        ds = LabeledDataset(features, labels, 10)
        d = tmp_path_factory.mktemp("idx")
        write_idx(ds, d / "i", d / "l")
        back = load_idx(d / "i", d / "l", num_classes=10)
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert np.max(np.abs(back.features - ds.features)) <= 0.5 / 255 + 1e-12


def _toy(counts, seed=0):
    labels = np.repeat(np.arange(len(counts)), counts)
    feats = np.random.default_rng(seed).normal(size=(labels.size, 3))
    return LabeledDataset(feats, labels, len(counts))


class TestSplit:
    def test_all_train(self):
        ds = _toy([5, 7])
        s = split(ds, (1.0, 0.0, 0.0))
        assert len(s.train) == 12 and len(s.val) == 0 and len(s.test) == 0

    def test_sizes(self):
        s = split(_toy([50, 30, 20]), (0.8, 0.1, 0.1))
        assert (len(s.train), len(s.val), len(s.test)) == (80, 10, 10)

    def test_same_seed_same_membership(self):
        ds = _toy([20, 20])
        a, b = split(ds, seed=4), split(ds, seed=4)
        assert a.val == b.val and a.test == b.test

    def test_too_small_class(self):
        with pytest.raises(ValueError, match="class 1"):
            split(_toy([10, 2]))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(3, 40), min_size=1, max_size=5),
           st.sampled_from([(0.8, 0.1, 0.1), (0.6, 0.2, 0.2), (0.5, 0.5, 0.0), (0.7, 0.15, 0.15)]),
           st.integers(0, 1000))
    def test_disjoint_stratified(self, counts, fractions, seed):
        ds = _toy(counts, seed)
        s = split(ds, fractions, seed)
        rows = [tuple(map(tuple, part.features)) for part in (s.train, s.val, s.test)]
        seen = [set(r) for r in rows]
        if sum(fractions) == 1.0:
            assert sum(len(r) for r in rows) == len(ds)
        assert not (seen[0] & seen[1] or seen[0] & seen[2] or seen[1] & seen[2])
        for part, f in zip((s.train, s.val, s.test), fractions):
            assert np.all(np.abs(part.class_counts() - f * np.array(counts)) <= 1 + 1e-9)


class TestSubsample:
    def test_sixty_per_class(self):
        out = subsample_per_class(_toy([80] * 10), 60, seed=1)
        assert len(out) == 600
        assert np.all(out.class_counts() == 60)

    def test_low_shot(self):
        assert np.all(subsample_per_class(_toy([9, 12]), 5).class_counts() == 5)

    def test_full_class_is_permutation(self):
        ds = _toy([4, 6])
        out = subsample_per_class(ds, 4)
        original = {tuple(r) for r in ds.features[ds.labels == 0]}
        assert {tuple(r) for r in out.features[out.labels == 0]} == original

    def test_insufficient(self):
        with pytest.raises(ValueError):
            subsample_per_class(_toy([3, 10]), 4)

    def test_deterministic(self):
        ds = _toy([10, 10])
        assert subsample_per_class(ds, 3, seed=2) == subsample_per_class(ds, 3, seed=2)


class TestSampleBatch:
    def test_single_example(self):
        ds = LabeledDataset(np.array([[1.0, 2.0]]), np.array([0]), 1)
        x, y = sample_batch(ds, 1, np.random.default_rng(0))
        np.testing.assert_array_equal(x, [[1.0, 2.0]])

    def test_labels_valid_and_reproducible(self):
        ds = _toy([5, 5, 5])
        a = sample_batch(ds, 50, np.random.default_rng(7))
        b = sample_batch(ds, 50, np.random.default_rng(7))
        assert a[1].max() < 3
        np.testing.assert_array_equal(a[0], b[0])

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            sample_batch(LabeledDataset(np.zeros((0, 2)), np.zeros(0), 2), 1,
                         np.random.default_rng(0))


class TestLabeledDataset:
    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            LabeledDataset(np.zeros((2, 2)), np.array([0, 2]), 2)

    def test_read_only(self):
        ds = _toy([2])
        with pytest.raises(ValueError):
            ds.features[0, 0] = 1.0


def _probe_accuracy(train_x, train_y, test_x, test_y, classes, steps=300):
    """Softmax regression on raw features, trained with the package's autodiff and SGD."""
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(scale=0.01, size=(train_x.shape[1], classes)), True)
    b = Tensor(np.zeros(classes), True)
    state = sgd_momentum_state([w.data, b.data])
    for _ in range(steps):
        loss = ad.mean(per_example_loss(head_logits(Tensor(train_x), w, b), train_y))
        loss.backward()
        state = apply_step([w, b], state, 0.1)
    pred = head_logits(Tensor(test_x), w, b).data.argmax(axis=1)
    return float(np.mean(pred == test_y))


class TestSynthetic:
    def test_mask(self, small_pair):
        _, _, mask = small_pair
        assert mask.shape == (10,) and mask.sum() == 5

    def test_deterministic(self):
        spec = SyntheticSpec(source_train_per_class=5, dim=4, seed=11)
        a, b = make_synthetic_transfer_pair(spec), make_synthetic_transfer_pair(spec)
        for sa, sb in zip(a[:2], b[:2]):
            for part in ("train", "val", "test"):
                assert getattr(sa, part) == getattr(sb, part)
        np.testing.assert_array_equal(a[2], b[2])

    def test_shapes_and_classes(self, small_pair):
        source, target, _ = small_pair
        assert source.num_classes == 10 and target.num_classes == 5
        assert source.train.feature_shape == target.train.feature_shape == (8,)
        assert np.all(target.test.class_counts() == 10)

    def test_probe_transfer(self):
        spec = SyntheticSpec(seed=5)
        source, target, mask = make_synthetic_transfer_pair(spec)
        relevant, irrelevant = np.flatnonzero(mask), np.flatnonzero(~mask)
        ct = spec.num_target_classes
        chance = 1.0 / ct
        results = {}
        for name, classes in (("relevant", relevant), ("irrelevant", irrelevant)):
            # source class -> target label: the i-th class of the group maps to target i % c_T
            mapping = {c: i % ct for i, c in enumerate(classes)}
            keep = np.isin(source.train.labels, classes)
            y = np.array([mapping[c] for c in source.train.labels[keep]])
            results[name] = _probe_accuracy(source.train.features[keep], y,
                                            target.test.features, target.test.labels, ct)
        assert results["relevant"] > chance + 0.3
        assert abs(results["irrelevant"] - chance) < 0.1
