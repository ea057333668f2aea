import numpy as np
import pytest

from fbseg.metrics import f1_score, random_baseline
from fbseg.polygons import ValidationError


def counting_oracle(pred, true):
    """Independent confusion-matrix implementation with explicit loops."""
    tp = fp = fn = 0
    for p, t in zip(np.asarray(pred).ravel(), np.asarray(true).ravel()):
        if p == 1 and t == 1:
            tp += 1
        elif p == 1 and t == 0:
            fp += 1
        elif p == 0 and t == 1:
            fn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return 2 * precision * recall / (precision + recall + 0.001)


class TestF1Score:
    def test_perfect_match_epsilon_algebra(self):
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[2:5, 2:5] = 1
        value = f1_score(mask, mask)
        assert abs(value - 2.0 / 2.001) < 1e-15
        assert round(value, 8) == 0.99950025

    def test_all_background_prediction_scores_zero(self):
        truth = np.zeros((8, 8), dtype=np.uint8)
        truth[1:3, 1:3] = 1
        assert f1_score(np.zeros((8, 8), dtype=np.uint8), truth) == 0.0

    def test_matches_counting_oracle_on_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            pred = rng.integers(0, 2, size=(16, 16))
            true = rng.integers(0, 2, size=(16, 16))
            assert abs(f1_score(pred, true) - counting_oracle(pred, true)) < 1e-12

    def test_non_binary_rejected(self):
        with pytest.raises(ValidationError):
            f1_score(np.full((4, 4), 2), np.zeros((4, 4)))
        with pytest.raises(ValidationError):
            f1_score(np.zeros((4, 4)), np.full((4, 4), 0.5))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            f1_score(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_positive_class_selection(self):
        # swapping classes in both masks changes the score: f1 is tied to
        # the polygon class, not symmetric over labels
        pred = np.array([[1, 0], [0, 0]], dtype=np.uint8)
        true = np.array([[1, 1], [0, 0]], dtype=np.uint8)
        direct = f1_score(pred, true)
        complemented = f1_score(1 - pred, 1 - true)
        assert direct != complemented


class TestRandomBaseline:
    def test_all_background_truth_scores_zero(self):
        rng = np.random.default_rng(1)
        masks = [np.zeros((16, 16), dtype=np.uint8)]
        assert random_baseline(masks, 200, rng) == 0.0

    def test_all_polygon_truth_matches_analytic(self):
        # precision is exactly 1 (no background to hit); recall ~ 0.5
        rng = np.random.default_rng(2)
        masks = [np.ones((32, 32), dtype=np.uint8)]
        value = random_baseline(masks, 500, rng)
        analytic = 2 * 1.0 * 0.5 / (1.5 + 0.001)
        assert abs(value - analytic) < 0.01

    def test_stable_across_seeds(self):
        mask = np.zeros((32, 32), dtype=np.uint8)
        mask[8:20, 8:20] = 1
        values = [random_baseline([mask], 1000, np.random.default_rng(seed))
                  for seed in (0, 1, 2)]
        assert max(values) - min(values) < 0.01

    def test_too_few_draws_rejected(self):
        with pytest.raises(ValidationError):
            random_baseline([np.zeros((4, 4), dtype=np.uint8)], 50,
                            np.random.default_rng(0))
