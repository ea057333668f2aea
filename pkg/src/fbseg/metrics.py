"""Segmentation scoring: minority-class f1 and the fair-coin baseline."""

from __future__ import annotations

import numpy as np

from fbseg.polygons import ValidationError

F1_EPSILON = 0.001


def f1_score(pred_mask: np.ndarray, true_mask: np.ndarray) -> float:
    """Harmonic precision/recall on the polygon class (label 1), with an
    epsilon-stabilized denominator: 2pr / (p + r + 0.001).

    Empty-set conventions: precision and recall are 0 when undefined, so a
    perfect match scores 2 / 2.001 = 0.99950025 (not 1.0).
    """
    pred = np.asarray(pred_mask)
    true = np.asarray(true_mask)
    if pred.shape != true.shape:
        raise ValidationError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    for name, arr in (("pred", pred), ("true", true)):
        if not np.isin(arr, (0, 1)).all():
            raise ValidationError(f"{name} mask is not binary")
    pred = pred.astype(bool)
    true = true.astype(bool)
    tp = float(np.count_nonzero(pred & true))
    fp = float(np.count_nonzero(pred & ~true))
    fn = float(np.count_nonzero(~pred & true))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    return 2.0 * precision * recall / (precision + recall + F1_EPSILON)


def random_baseline(masks, n_draws: int, rng: np.random.Generator) -> float:
    """Mean f1 of per-pixel fair-coin predictions against the given masks."""
    if n_draws < 100:
        raise ValidationError(f"n_draws must be >= 100, got {n_draws}")
    scores = []
    for mask in masks:
        mask = np.asarray(mask)
        draws = rng.integers(0, 2, size=(n_draws, *mask.shape), dtype=np.uint8)
        for draw in draws:
            scores.append(f1_score(draw, mask))
    return float(np.mean(scores))
