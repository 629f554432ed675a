import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdbnet.autodiff import Tensor, grad_check
from mdbnet.data.synthetic import easy_tier, generate_scene
from mdbnet.errors import AllZeroFrequencies, EmptyMask, InvalidK, LabelOutOfRange, NonFinite, ShapeMismatch
from mdbnet.geometry import Visibility
from mdbnet.losses import (
    ClassWeights,
    CombinedLossConfig,
    class_frequencies,
    combined_loss,
    kmeans_1d,
    rare_classes,
    resample_mask,
    reweight_classes,
    smooth_ce,
    weighted_ce,
)


def best_partition_cost(values, k):
    """Exhaustive search over contiguous splits of the sorted values (optimal 1-D clusters are contiguous)."""
    xs = np.sort(np.asarray(values, dtype=np.float64))
    n = len(xs)
    best = math.inf
    for cuts in itertools.combinations(range(1, n), k - 1):
        bounds = (0,) + cuts + (n,)
        cost = sum(((xs[a:b] - xs[a:b].mean()) ** 2).sum() for a, b in zip(bounds[:-1], bounds[1:]))
        best = min(best, cost)
    return best


def kmeans_cost(values, k, seed=0):
    assign, cents = kmeans_1d(values, k, seed=seed)
    x = np.asarray(values, dtype=np.float64)
    return float(((x - cents[assign]) ** 2).sum())


def scalar_ce(logits, label):
    m = max(logits)
    lse = m + math.log(sum(math.exp(v - m) for v in logits))
    return lse - logits[label]


class TestClassFrequencies:
    def test_all_empty(self):
        counts = class_frequencies([np.zeros((4, 4, 4), np.uint8)])
        assert counts[0] == 64 and counts[1:].sum() == 0

    def test_mask_and_sentinel(self):
        labels = np.array([[0, 1], [255, 3]], np.uint8)
        counts = class_frequencies([labels], [np.array([[True, False], [True, True]])])
        assert list(counts[:4]) == [1, 0, 0, 1]

    def test_matches_generator_bookkeeping(self):
        samples = [generate_scene(easy_tier(), seed=s) for s in (1, 2)]
        counts = class_frequencies([s.gt_labels for s in samples])
        np.testing.assert_array_equal(counts, samples[0].class_counts + samples[1].class_counts)

    def test_out_of_range(self):
        with pytest.raises(LabelOutOfRange):
            class_frequencies([np.array([0, 12])])


class TestKMeans:
    def test_k_equals_n(self):
        values = [3.0, -1.0, 7.5, 2.0]
        assign, cents = kmeans_1d(values, 4)
        assert kmeans_cost(values, 4) == 0.0
        np.testing.assert_array_equal(np.sort(cents), np.sort(values))
        assert len(set(assign)) == 4

    def test_two_groups(self):
        assign, cents = kmeans_1d([1, 1.1, 10, 10.2], 2)
        assert list(assign) == [0, 0, 1, 1]
        np.testing.assert_allclose(cents, [1.05, 10.1])

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_all_equal(self, k):
        _, cents = kmeans_1d([4.0] * 5, k)
        np.testing.assert_array_equal(cents, 4.0)

    def test_invalid_k(self):
        with pytest.raises(InvalidK):
            kmeans_1d([1.0, 2.0], 3)
        with pytest.raises(InvalidK):
            kmeans_1d([1.0], 0)

    def test_deterministic(self):
        values = np.random.default_rng(0).normal(size=30)
        a, b = kmeans_1d(values, 3, seed=4), kmeans_1d(values, 3, seed=4)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    @settings(max_examples=200, deadline=None)
    @given(values=st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=8), k=st.integers(1, 3),
           seed=st.integers(0, 1000))
    def test_matches_exhaustive_partition(self, values, k, seed):
        k = min(k, len(values))
        assert kmeans_cost(values, k, seed) <= best_partition_cost(values, k) + 1e-9


class TestReweight:
    def test_uniform(self):
        np.testing.assert_allclose(reweight_classes(np.full(12, 50)).weights, 1.0)

    def test_single_cluster(self):
        freqs = np.arange(1, 13) * 100
        np.testing.assert_allclose(reweight_classes(freqs, k=1).weights, 1.0)

    def test_rare_common(self):
        freqs = np.array([100] * 6 + [10_000] * 6)
        w = reweight_classes(freqs, k=2).weights
        # inverse medians 1/100 and 1/10000, normalised to mean 1
        mean = (0.01 + 0.0001) / 2
        np.testing.assert_allclose(w[:6], 0.01 / mean)
        np.testing.assert_allclose(w[6:], 0.0001 / mean)
        np.testing.assert_allclose(w[0] / w[6], 100.0)

    def test_clamped(self):
        freqs = np.array([1] + [10 ** 9] * 11)
        w = reweight_classes(freqs, k=2).weights
        assert w.min() >= 0.01 and w.max() <= 100.0
        assert w.min() == 0.01

    def test_absent_classes_get_one(self):
        freqs = np.array([1000, 0, 10, 0, 1000, 10, 0, 0, 0, 0, 0, 0])
        w = reweight_classes(freqs, k=2).weights
        np.testing.assert_array_equal(w[[1, 3, 6]], 1.0)
        assert w[2] > w[0]

    def test_all_zero(self):
        with pytest.raises(AllZeroFrequencies):
            reweight_classes(np.zeros(12))

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_permutation_equivariant(self, seed):
        rng = np.random.default_rng(seed)
        freqs = rng.integers(1, 100_000, 12)
        perm = rng.permutation(12)
        np.testing.assert_allclose(reweight_classes(freqs[perm]).weights, reweight_classes(freqs).weights[perm],
                                   rtol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_rarer_group_heavier(self, seed):
        rng = np.random.default_rng(seed)
        n_rare = rng.integers(1, 12)
        freqs = np.concatenate([rng.integers(10, 20, n_rare), rng.integers(10_000, 20_000, 12 - n_rare)])
        w = reweight_classes(freqs, k=2).weights
        assert w[:n_rare].min() > w[n_rare:].max()

    def test_save_load(self, tmp_path):
        w = reweight_classes(np.arange(1, 13) ** 3)
        w.save(tmp_path / "w.txt")
        lines = (tmp_path / "w.txt").read_text().splitlines()
        assert len(lines) == 12 and lines[0].startswith("0 ")
        np.testing.assert_array_equal(ClassWeights.load(tmp_path / "w.txt").weights, w.weights)

    def test_class_weights_validation(self):
        with pytest.raises(ValueError):
            ClassWeights(np.zeros(12))
        with pytest.raises(ValueError):
            ClassWeights(np.ones(11))


class TestRareClasses:
    def test_three_groups(self):
        freqs = np.array([5000, 10, 4000, 3000, 12, 300, 280, 9, 310, 11, 290, 4500])
        assert rare_classes(freqs) == [1, 4, 7, 9]

    def test_empty_class_never_rare(self):
        freqs = np.array([3] + [1000] * 6 + [100_000] * 5)
        assert 0 not in rare_classes(freqs)

    def test_absent_classes_skipped(self):
        freqs = np.array([1000, 0, 10, 0, 1000, 10, 0, 0, 0, 0, 0, 500])
        assert rare_classes(freqs, k=2) == [2, 5]

    def test_rare_get_the_largest_weights(self):
        rng = np.random.default_rng(4)
        freqs = rng.integers(1, 100_000, 12)
        w = reweight_classes(freqs).weights
        rare = rare_classes(freqs)
        others = [c for c in range(1, 12) if c not in rare]
        assert min(w[rare]) > max(w[others])


class TestWeightedCe:
    def test_unit_weights_equal_unweighted(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(12, 3, 4, 5))
        labels = rng.integers(0, 12, (3, 4, 5))
        want = np.mean([scalar_ce(logits[:, i, j, l], labels[i, j, l])
                        for i, j, l in np.ndindex(labels.shape)])
        assert abs(weighted_ce(logits, labels, ClassWeights.uniform()).data - want) < 1e-12

    def test_margin_drives_loss_to_zero(self):
        labels = np.array([[[3]]])
        losses = []
        for margin in (1.0, 10.0, 50.0):
            logits = np.zeros((12, 1, 1, 1))
            logits[3] = margin
            losses.append(float(weighted_ce(logits, labels).data))
        assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-20

    def test_two_voxel_hand_computation(self):
        logits = np.zeros((12, 2, 1, 1))
        logits[:, 0, 0, 0] = np.linspace(-1, 1, 12)
        logits[:, 1, 0, 0] = np.linspace(2, -2, 12)
        labels = np.array([1, 5]).reshape(2, 1, 1)
        w = np.ones(12)
        w[1], w[5] = 2.0, 0.5
        ce0 = scalar_ce(list(logits[:, 0, 0, 0]), 1)
        ce1 = scalar_ce(list(logits[:, 1, 0, 0]), 5)
        want = (2.0 * ce0 + 0.5 * ce1) / 2.5
        assert abs(float(weighted_ce(logits, labels, ClassWeights(w)).data) - want) < 1e-12

    def test_batched_class_axis(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(2, 12, 3, 3, 3))
        labels = rng.integers(0, 12, (2, 3, 3, 3))
        per = [float(weighted_ce(logits[i], labels[i]).data) for i in range(2)]
        assert abs(float(weighted_ce(logits, labels).data) - np.mean(per)) < 1e-12

    def test_equals_smooth_ce_without_smoothing(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(12, 7, 9))
        labels = rng.integers(0, 12, (7, 9))
        labels[0, 0] = 255
        a = float(weighted_ce(logits, labels).data)
        b = float(smooth_ce(logits, labels, 0.0).data)
        assert abs(a - b) < 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(3)
        logits = Tensor(rng.normal(size=(12, 2, 3, 2)), requires_grad=True)
        labels = rng.integers(0, 12, (2, 3, 2))
        w = ClassWeights(rng.uniform(0.2, 5, 12))
        assert grad_check(lambda t: weighted_ce(t, labels, w), [logits]) < 1e-5

    def test_errors(self):
        with pytest.raises(ShapeMismatch):
            weighted_ce(np.zeros((12, 2, 2, 2)), np.zeros((2, 2, 3), np.int64))
        with pytest.raises(EmptyMask):
            weighted_ce(np.zeros((12, 2, 2, 2)), np.zeros((2, 2, 2), np.int64), mask=np.zeros((2, 2, 2), bool))


class TestSmoothCe:
    def test_uniform_logits(self):
        labels = np.random.default_rng(0).integers(0, 12, (4, 5))
        for s in (0.0, 0.1, 0.7):
            assert abs(float(smooth_ce(np.zeros((12, 4, 5)), labels, s).data) - math.log(12)) < 1e-12

    def test_single_pixel_oracle(self):
        logits = np.linspace(-2, 3, 12)[:, None, None] ** 2 / 3
        label = 4
        m = logits.max()
        logp = logits[:, 0, 0] - (m + math.log(np.exp(logits[:, 0, 0] - m).sum()))
        target = np.full(12, 0.1 / 12)
        target[label] += 0.9
        want = -float((target * logp).sum())
        assert abs(float(smooth_ce(logits, np.array([[label]]), 0.1).data) - want) < 1e-12

    def test_ignore_mask(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(12, 2, 2))
        labels = rng.integers(0, 12, (2, 2))
        ignore = np.array([[False, True], [True, True]])
        a = float(smooth_ce(logits, labels, 0.1, ignore).data)
        b = float(smooth_ce(logits[:, :1, :1], labels[:1, :1], 0.1).data)
        assert abs(a - b) < 1e-12

    def test_bad_smoothing(self):
        with pytest.raises(ValueError):
            smooth_ce(np.zeros((12, 1, 1)), np.zeros((1, 1), np.int64), 1.0)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        logits = Tensor(rng.normal(size=(12, 3, 3)), requires_grad=True)
        labels = rng.integers(0, 12, (3, 3))
        assert grad_check(lambda t: smooth_ce(t, labels, 0.1), [logits]) < 1e-5


class TestResampleMask:
    def _volume(self, n_occ, n_empty):
        labels = np.zeros(n_occ + n_empty + 20, np.uint8)
        labels[:n_occ] = 3
        states = np.full(labels.shape, Visibility.VISIBLE_EMPTY, np.uint8)
        states[-20:] = Visibility.OUTSIDE_FRUSTUM
        return labels, states

    def test_quota(self):
        labels, states = self._volume(100, 1000)
        mask = resample_mask(labels, states, 2.0, seed=0)
        assert mask[:100].all() and mask[100:].sum() == 200 and not mask[-20:].any()

    def test_supply_short(self):
        labels, states = self._volume(100, 50)
        mask = resample_mask(labels, states, 2.0)
        assert mask.sum() == 150 and not mask[-20:].any()

    def test_deterministic(self):
        labels, states = self._volume(30, 500)
        first = resample_mask(labels, states, 2, seed=9)
        np.testing.assert_array_equal(first, resample_mask(labels, states, 2, seed=9))
        assert not np.array_equal(resample_mask(labels, states, 2, seed=9), resample_mask(labels, states, 2, seed=10))

    def test_errors(self):
        labels, states = self._volume(3, 3)
        with pytest.raises(ValueError):
            resample_mask(labels, states, 0)
        with pytest.raises(ShapeMismatch):
            resample_mask(labels, states[:-1], 2)


class TestCombinedLoss:
    def test_lambda_zero(self):
        assert combined_loss(0.7, 1.3, 0.0) == 1.3

    @pytest.mark.parametrize("lam, l_ss, l_ssc", [(1.0, 0.7, 1.3), (0.5, 2.0, 1.0)])
    def test_examples(self, lam, l_ss, l_ssc):
        assert combined_loss(l_ss, l_ssc, lam) == pytest.approx(2.0, abs=1e-15)

    def test_gradients_reach_both_terms(self):
        a, b = Tensor(np.array(0.7), requires_grad=True), Tensor(np.array(1.3), requires_grad=True)
        combined_loss(a, b, 0.5).backward()
        assert a.grad == 0.5 and b.grad == 1.0

    def test_non_finite(self):
        with pytest.raises(NonFinite):
            combined_loss(float("nan"), 1.0, 1.0)

    def test_config(self):
        assert CombinedLossConfig().lam == 1.0
        with pytest.raises(ValueError):
            CombinedLossConfig(smoothing=1.0)
        with pytest.raises(ValueError):
            CombinedLossConfig(lam=-1)
