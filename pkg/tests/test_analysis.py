import numpy as np
import pytest

from fbseg.analysis import (
    ConvergenceProfile,
    EvalReport,
    PcaProjection,
    convergence_profile,
    evaluate_model,
    pca_strongest_component,
    pooled_logit_features,
)
from fbseg.autodiff import Tensor
from fbseg.network import ArchConfig, ModelParams, TrajectoryRecord, run_trajectory
from fbseg.polygons import build_split


def record_from_features(features):
    """Wrap (T, k) feature rows as a trajectory record whose logits pool
    back to exactly those rows."""
    record = TrajectoryRecord()
    for row in features:
        grid = np.tile(np.asarray(row, dtype=np.float64)[None, :, None, None], (1, 1, 2, 2))
        record.logits.append(Tensor(grid))
    return record


class TestPcaStrongestComponent:
    def test_rank_one_data(self):
        base = np.array([2.0, -1.0])
        trajectories = [record_from_features([c * base for c in (1.0, 2.0)]),
                        record_from_features([c * base for c in (-1.0, 3.0)])]
        proj = pca_strongest_component(trajectories)
        assert abs(proj.explained_variance_ratio - 1.0) < 1e-12
        direction = base / np.linalg.norm(base)
        assert min(np.linalg.norm(proj.component - direction),
                   np.linalg.norm(proj.component + direction)) < 1e-9

    def test_known_covariance_ratio(self):
        # rows with sample covariance diag(16, 4)/3: top ratio 0.8, axis 0
        rows = [(2.0, 1.0), (2.0, -1.0), (-2.0, 1.0), (-2.0, -1.0)]
        trajectories = [record_from_features(rows[:2]), record_from_features(rows[2:])]
        proj = pca_strongest_component(trajectories)
        assert abs(proj.explained_variance_ratio - 0.8) < 1e-10
        assert abs(abs(proj.component[0]) - 1.0) < 1e-9
        assert proj.component[proj.component.argmax()] > 0

    def test_matches_dense_eigensolver(self):
        rng = np.random.default_rng(3)
        feats = rng.normal(size=(6, 5, 4))  # 6 instances, 5 steps, 4 features
        trajectories = [record_from_features(f) for f in feats]
        proj = pca_strongest_component(trajectories)
        stacked = feats.reshape(-1, 4)
        centered = stacked - stacked.mean(axis=0)
        cov = centered.T @ centered / (len(stacked) - 1)
        evals, evecs = np.linalg.eigh(cov)
        top = evecs[:, -1]
        assert min(np.linalg.norm(proj.component - top),
                   np.linalg.norm(proj.component + top)) < 1e-8
        assert abs(proj.explained_variance_ratio - evals[-1] / evals.sum()) < 1e-10

    def test_ratio_beats_random_unit_vectors(self):
        rng = np.random.default_rng(4)
        feats = rng.normal(size=(5, 4, 3))
        trajectories = [record_from_features(f) for f in feats]
        proj = pca_strongest_component(trajectories)
        stacked = feats.reshape(-1, 3)
        centered = stacked - stacked.mean(axis=0)
        cov = centered.T @ centered / (len(stacked) - 1)
        trace = np.trace(cov)
        for _ in range(100):
            v = rng.normal(size=3)
            v /= np.linalg.norm(v)
            assert proj.explained_variance_ratio >= (v @ cov @ v) / trace - 1e-9

    def test_row_order_invariance_up_to_sign(self):
        rng = np.random.default_rng(5)
        feats = rng.normal(size=(6, 3, 4))
        a = pca_strongest_component([record_from_features(f) for f in feats])
        b = pca_strongest_component([record_from_features(f) for f in feats[::-1]])
        assert min(np.linalg.norm(a.component - b.component),
                   np.linalg.norm(a.component + b.component)) < 1e-9

    def test_zero_variance_degenerate(self):
        rows = [(1.0, 1.0), (1.0, 1.0)]
        trajectories = [record_from_features(rows), record_from_features(rows)]
        proj = pca_strongest_component(trajectories)
        assert proj.degenerate
        assert proj.explained_variance_ratio == 1.0
        np.testing.assert_array_equal(proj.component, [1.0, 0.0])

    def test_needs_two_trajectories(self):
        with pytest.raises(ValueError):
            pca_strongest_component([record_from_features([(1.0, 2.0)])])

    def test_channel_slice_selects_features(self):
        rows = [(1.0, 2.0, 3.0), (4.0, 5.0, 6.0)]
        record = record_from_features(rows)
        feats = pooled_logit_features(record, channel_slice=slice(1, 3))
        np.testing.assert_allclose(feats, [[2.0, 3.0], [5.0, 6.0]])


class TestConvergenceProfile:
    def test_zero_trajectory(self):
        record = TrajectoryRecord()
        zero = Tensor(np.zeros((1, 2, 4, 4)))
        record.states = [zero, zero, zero]
        record.deltas = [zero, zero]
        profile = convergence_profile(record)
        assert profile.delta_l2 == [0.0, 0.0]
        assert profile.state_diff_inf == [0.0, 0.0]

    def test_decay_bounds_delta_ratios(self):
        config = ArchConfig(enc_channels=(4, 6), bottleneck_channels=8)
        params = ModelParams.initialize(config, seed=0)
        x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 16, 16)))
        record = run_trajectory(x, params, 5)
        profile = convergence_profile(record)
        proposal_norms = [float(np.linalg.norm(p.values)) for p in record.proposals]
        ratio_bound = np.exp(-1.0 / config.tau) * max(proposal_norms) / min(proposal_norms)
        for a, b in zip(profile.delta_l2[:-1], profile.delta_l2[1:]):
            assert b / a <= ratio_bound * (1 + 1e-9)

    def test_empty_record_rejected(self):
        with pytest.raises(ValueError):
            convergence_profile(TrajectoryRecord())


class TestEvaluateModel:
    def test_report_statistics_consistent(self):
        config = ArchConfig(enc_channels=(4, 6), bottleneck_channels=8)
        params = ModelParams.initialize(config, seed=1)
        instances, _ = build_split({"D": 4, "sigma": 0.0, "H": 16, "W": 16,
                                    "base_seed": 3, "split": "test"})
        report = evaluate_model(params, [(i.image, i.mask) for i in instances],
                                config={"sigma": 0.0})
        assert len(report.per_instance_f1) == 4
        assert abs(report.mean_f1 - np.mean(report.per_instance_f1)) < 1e-15
        assert abs(report.std_f1 - np.std(report.per_instance_f1)) < 1e-15
        assert report.config == {"sigma": 0.0}
