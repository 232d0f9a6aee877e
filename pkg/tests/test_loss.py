import numpy as np
import pytest

from renalseg.engine import LossConfig, Tensor, compute_class_weights, weighted_cross_entropy
from renalseg.preprocess import one_hot

import oracles


def unit_cfg(n_classes, eps=1e-7):
    return LossConfig(class_weights=[1.0] * n_classes, clip_epsilon=eps)


class TestWeightedCrossEntropy:
    def test_perfect_prediction_costs_the_clip(self):
        target = one_hot(np.array([[[0, 1]]]), 2).astype(np.float64)
        eps = 1e-7
        loss, _ = weighted_cross_entropy(Tensor(target.copy()), Tensor(target), unit_cfg(2, eps))
        expected = -np.log(1.0 - eps)
        assert abs(loss.item() - expected) < 1e-12
        assert loss.item() < 1e-5

    def test_perfect_prediction_near_zero_at_float32(self):
        target = one_hot(np.array([[[0, 1]]]), 2)
        loss, _ = weighted_cross_entropy(Tensor(target.copy()), Tensor(target), unit_cfg(2))
        assert loss.item() < 1e-5

    def test_uniform_two_class_single_voxel_is_log2(self):
        pred = Tensor(np.full((2, 1, 1, 1), 0.5, dtype=np.float32))
        target = Tensor(one_hot(np.zeros((1, 1, 1), dtype=np.int64), 2))
        loss, _ = weighted_cross_entropy(pred, target, unit_cfg(2))
        assert abs(loss.item() - np.log(2.0)) < 1e-6

    def test_unit_weights_match_scalar_loop(self, rng):
        pred = rng.uniform(0.05, 0.95, size=(3, 4, 4, 4)).astype(np.float32)
        target = one_hot(rng.integers(0, 3, size=(4, 4, 4)), 3)
        loss, _ = weighted_cross_entropy(Tensor(pred), Tensor(target), unit_cfg(3))
        want = oracles.cross_entropy_scalar_loop(pred, target, 1e-7)
        assert abs(loss.item() - want) / abs(want) < 1e-6

    def test_non_one_hot_target_rejected(self, rng):
        pred = Tensor(rng.uniform(0.2, 0.8, size=(2, 2, 2, 2)).astype(np.float32))
        bad = np.full((2, 2, 2, 2), 0.4, dtype=np.float32)
        with pytest.raises(ValueError, match="one-hot"):
            weighted_cross_entropy(pred, Tensor(bad), unit_cfg(2))

    def test_class_weights_scale_their_elements(self, rng):
        pred = rng.uniform(0.2, 0.8, size=(2, 2, 2, 2)).astype(np.float32)
        target = one_hot(rng.integers(0, 2, size=(2, 2, 2)), 2)
        base, _ = weighted_cross_entropy(Tensor(pred), Tensor(target), unit_cfg(2))
        doubled, _ = weighted_cross_entropy(
            Tensor(pred), Tensor(target), LossConfig(class_weights=[2.0, 2.0])
        )
        assert abs(doubled.item() - 2 * base.item()) < 1e-6

    def test_returned_gradient_matches_backward(self, rng):
        pred = Tensor(rng.uniform(0.2, 0.8, size=(2, 3, 3, 3)).astype(np.float32), requires_grad=True)
        target = Tensor(one_hot(rng.integers(0, 2, size=(3, 3, 3)), 2))
        loss, grad = weighted_cross_entropy(pred, target, LossConfig(class_weights=[1.0, 3.0]))
        loss.backward()
        np.testing.assert_array_equal(pred.grad, grad)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(class_weights=[1.0, -1.0])
        with pytest.raises(ValueError):
            LossConfig(class_weights=[1.0], clip_epsilon=0.7)


class TestComputeClassWeights:
    def test_balanced_classes_get_unit_weights(self):
        labels = one_hot(np.array([[[0, 1], [1, 0]]]), 2)
        weights = compute_class_weights([Tensor(labels)])
        np.testing.assert_allclose(weights, [1.0, 1.0])

    def test_inverse_frequency(self):
        flat = np.zeros((1, 2, 5), dtype=np.int64)
        flat[0, 1, 2] = 1  # 9 background, 1 foreground
        weights = compute_class_weights([Tensor(one_hot(flat, 2))])
        np.testing.assert_allclose(weights, [1.0, 9.0], rtol=1e-6)

    def test_three_class_counts_match_histogram_oracle(self, rng):
        volumes = [rng.integers(0, 3, size=(4, 4, 4)) for _ in range(5)]
        weights = compute_class_weights([Tensor(one_hot(v, 3)) for v in volumes])
        counts = oracles.class_counts_bruteforce(volumes, 3)
        total = sum(counts)
        raw = [total / (3 * c) for c in counts]
        expected = [w / min(raw) for w in raw]
        np.testing.assert_allclose(weights, expected, rtol=1e-6)

    def test_absent_class_names_the_class(self):
        labels = one_hot(np.zeros((2, 2, 2), dtype=np.int64), 3)
        with pytest.raises(ValueError, match="class 1"):
            compute_class_weights([Tensor(labels)])
