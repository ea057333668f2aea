"""Trajectory analysis: evaluation reports, principal-component projection
of the head logits over time, and convergence profiling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fbseg.metrics import f1_score
from fbseg.network import ModelParams, TrajectoryRecord, predict_mask
from fbseg.seeding import stream


@dataclass
class EvalReport:
    per_instance_f1: list
    config: dict = field(default_factory=dict)

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.per_instance_f1))

    @property
    def std_f1(self) -> float:
        return float(np.std(self.per_instance_f1))


def evaluate_model(params: ModelParams, samples, config: dict | None = None) -> EvalReport:
    """Polygon-class f1 on (image, mask) pairs using hard argmax masks."""
    scores = [f1_score(predict_mask(params, image), mask) for image, mask in samples]
    return EvalReport(per_instance_f1=scores, config=dict(config or {}))


@dataclass
class PcaProjection:
    component: np.ndarray            # unit norm
    explained_variance_ratio: float
    projections: np.ndarray          # (n_instances, timesteps)
    degenerate: bool = False
    mean: np.ndarray | None = None

    def project(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features) - self.mean) @ self.component


def pooled_logit_features(record: TrajectoryRecord, channel_slice=slice(None)) -> np.ndarray:
    """Per-timestep feature vectors: head logits, sliced on the channel axis
    and mean-pooled over the image plane."""
    rows = []
    for logits in record.logits:
        arr = logits.values[0, channel_slice]
        rows.append(arr.mean(axis=(1, 2)))
    return np.stack(rows)


def _power_iteration(cov: np.ndarray, tol: float = 1e-10, max_iter: int = 100000) -> np.ndarray:
    n = cov.shape[0]
    v = stream("pca-power-start", n).normal(size=n)
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        av = cov @ v
        norm = np.linalg.norm(av)
        if norm == 0.0:
            break
        nxt = av / norm
        if np.abs(nxt - v).max() < tol:
            v = nxt
            break
        v = nxt
    return v


def pca_strongest_component(trajectories, channel_slice=slice(None)) -> PcaProjection:
    """Top principal component of the stacked (instance x timestep) pooled
    logit features, found by power iteration on the covariance.

    The component's sign is fixed so its largest-magnitude entry is
    positive.  A zero-variance stack returns a fixed basis vector flagged
    degenerate with ratio 1.0.
    """
    if len(trajectories) < 2:
        raise ValueError("need at least two trajectories")
    per_instance = [pooled_logit_features(rec, channel_slice) for rec in trajectories]
    stacked = np.concatenate(per_instance, axis=0)
    mean = stacked.mean(axis=0)
    centered = stacked - mean
    n_features = stacked.shape[1]
    cov = centered.T @ centered / max(1, len(stacked) - 1)
    trace = float(np.trace(cov))
    scale = float(np.abs(stacked).max())
    if trace <= 1e-24 * max(1.0, scale * scale):
        component = np.zeros(n_features)
        component[0] = 1.0
        projections = centered @ component
        return PcaProjection(
            component=component, explained_variance_ratio=1.0,
            projections=projections.reshape(len(trajectories), -1),
            degenerate=True, mean=mean)
    component = _power_iteration(cov)
    top = np.abs(component).argmax()
    if component[top] < 0:
        component = -component
    eigenvalue = float(component @ cov @ component)
    projections = centered @ component
    return PcaProjection(
        component=component,
        explained_variance_ratio=eigenvalue / trace,
        projections=projections.reshape(len(trajectories), -1),
        degenerate=False,
        mean=mean)


@dataclass
class ConvergenceProfile:
    delta_l2: list      # ||delta(t)||_2 per step
    state_diff_inf: list  # ||h(t) - h(t-1)||_inf per step


def convergence_profile(record: TrajectoryRecord) -> ConvergenceProfile:
    if record.timesteps < 1:
        raise ValueError("record holds no steps")
    delta_l2 = [float(np.linalg.norm(d.values)) for d in record.deltas]
    diffs = [float(np.abs(b.values - a.values).max())
             for a, b in zip(record.states[:-1], record.states[1:])]
    return ConvergenceProfile(delta_l2=delta_l2, state_diff_inf=diffs)
