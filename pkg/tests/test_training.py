import numpy as np
import pytest

from fbseg import autodiff as ad
from fbseg.autodiff import ContractError, Tape, Tensor, backward, cross_entropy
from fbseg.metrics import f1_score
from fbseg.network import (
    ArchConfig,
    DivergenceError,
    ModelParams,
    predict_mask,
    run_trajectory,
    save_checkpoint,
)
from fbseg.polygons import build_split
from fbseg.training import (
    OptimizerState,
    TrainConfig,
    adam_step,
    one_hot_mask,
    train,
    trajectory_loss,
)


def small_config(**kw):
    defaults = dict(enc_channels=(4, 6), bottleneck_channels=8)
    defaults.update(kw)
    return ArchConfig(**defaults)


def samples_for(sigma=0.0, count=4, size=16, base_seed=0, split="train"):
    instances, _ = build_split({"D": count, "sigma": sigma, "H": size, "W": size,
                                "base_seed": base_seed, "split": split})
    return [(inst.image, inst.mask) for inst in instances]


class TestAdam:
    def _scalar_params(self, value=1.0):
        config = small_config()
        params = ModelParams.initialize(config, seed=0)
        return params

    def test_zero_gradient_leaves_parameters_unchanged(self):
        params = self._scalar_params()
        before = [t.values.copy() for t in params.tensors()]
        opt = OptimizerState.for_params(params)
        adam_step(params, opt)  # no grads set at all
        for prev, tensor in zip(before, params.tensors()):
            np.testing.assert_array_equal(prev, tensor.values)

    def test_first_step_closed_form(self):
        # with zero moments the bias corrections cancel: d = -lr * g / (|g| + eps)
        params = self._scalar_params()
        opt = OptimizerState.for_params(params, learning_rate=0.01)
        grads = {}
        for name, tensor in params.named():
            g = np.random.default_rng(hash(name) % 2**32).normal(size=tensor.shape)
            tensor.grad = g
            grads[name] = g
        before = {name: t.values.copy() for name, t in params.named()}
        adam_step(params, opt)
        for name, tensor in params.named():
            g = grads[name]
            expected = before[name] - 0.01 * g / (np.abs(g) + opt.epsilon)
            np.testing.assert_allclose(tensor.values, expected, rtol=1e-12, atol=1e-15)

    def test_constant_gradient_update_approaches_learning_rate(self):
        # scalar simulation: with a constant gradient the bias-corrected
        # update magnitude converges to the learning rate
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        m = w = 0.0
        theta = 0.0
        g = 0.37
        for t in range(1, 201):
            m = b1 * m + (1 - b1) * g
            w = b2 * w + (1 - b2) * g * g
            step = lr * (m / (1 - b1 ** t)) / (np.sqrt(w / (1 - b2 ** t)) + eps)
            theta -= step
        assert abs(step - lr) < 0.01 * lr

    def test_non_finite_gradient_aborts_with_name(self):
        params = self._scalar_params()
        opt = OptimizerState.for_params(params)
        params.bott_a_w.grad = np.full_like(params.bott_a_w.values, np.nan)
        with pytest.raises(DivergenceError, match="bott_a_w"):
            adam_step(params, opt)


class TestTrajectoryLoss:
    def test_single_step_equals_plain_cross_entropy(self):
        config = small_config()
        params = ModelParams.initialize(config, seed=1)
        image, mask = samples_for(count=1)[0]
        x = Tensor(image[None, None])
        y = Tensor(one_hot_mask(mask, 2))
        record = run_trajectory(x, params, 1)
        expected = cross_entropy(record.predictions[0], y)
        # fused log-softmax form agrees with the probability-space op away
        # from saturation
        assert abs(trajectory_loss(record, y).item() - expected.item()) < 1e-12

    def test_identical_predictions_scale_linearly(self):
        config = small_config()
        params = ModelParams.initialize(config, seed=2)
        image, mask = samples_for(count=1)[0]
        x = Tensor(image[None, None])
        y = Tensor(one_hot_mask(mask, 2))
        record = run_trajectory(x, params, 4)
        record.logits = [record.logits[0]] * 4
        record.predictions = [record.predictions[0]] * 4
        single = cross_entropy(record.predictions[0], y).item()
        assert abs(trajectory_loss(record, y).item() - 4 * single) < 1e-11

    def test_backward_equals_sum_of_per_step_backwards(self):
        # Eq. of summed trajectory gradient: separate backwards of each
        # per-step loss accumulate to the gradient of the summed loss.
        config = small_config()
        image, mask = samples_for(count=1, size=16)[0]
        y = Tensor(one_hot_mask(mask, 2))

        def grads(summed):
            params = ModelParams.initialize(config, seed=3)
            x = Tensor(image[None, None])
            with Tape() as tape:
                record = run_trajectory(x, params, 3)
                if summed:
                    backward(trajectory_loss(record, y))
                else:
                    for pred in record.predictions:
                        backward(cross_entropy(pred, y))
            tape.clear()
            return {name: t.grad.copy() for name, t in params.named()}

        combined = grads(summed=True)
        separate = grads(summed=False)
        for name in combined:
            np.testing.assert_allclose(combined[name], separate[name],
                                       rtol=0, atol=1e-9)

    def test_length_mismatch_rejected(self):
        config = small_config()
        params = ModelParams.initialize(config, seed=4)
        image, mask = samples_for(count=1)[0]
        record = run_trajectory(Tensor(image[None, None]), params, 2)
        record.predictions = record.predictions[:1]
        record.logits = record.logits[:1]
        with pytest.raises(ContractError, match="length"):
            trajectory_loss(record, Tensor(one_hot_mask(mask, 2)))


class TestTrain:
    def test_single_instance_overfit(self):
        config = TrainConfig(epochs=10, seed=0)
        arch = small_config()
        params = ModelParams.initialize(arch, seed=0)
        samples = samples_for(count=1, size=16)
        train(params, samples, config)
        image, mask = samples[0]
        assert f1_score(predict_mask(params, image), mask) > 0.9

    def test_determinism_bit_identical_checkpoints(self, tmp_path):
        def run(path):
            config = TrainConfig(epochs=2, seed=5)
            params = ModelParams.initialize(small_config(), seed=5)
            train(params, samples_for(count=3, size=16), config)
            save_checkpoint(params, path)
            return path.read_bytes()

        assert run(tmp_path / "a.ckpt") == run(tmp_path / "b.ckpt")

    def test_feedback_and_feedforward_step_counts_match(self, monkeypatch):
        import fbseg.training as training_mod

        samples = samples_for(count=3, size=16)
        counts = {}
        real_step = training_mod.adam_step
        for feedback in (True, False):
            calls = []
            monkeypatch.setattr(training_mod, "adam_step",
                                lambda p, o: (calls.append(1), real_step(p, o)))
            config = TrainConfig(epochs=2, feedback_enabled=feedback,
                                 use_decay=feedback, seed=1)
            arch = small_config(feedback=feedback, use_decay=feedback)
            params = ModelParams.initialize(arch, seed=1)
            train(params, samples, config)
            counts[feedback] = len(calls)
        assert counts[True] == counts[False] == 2 * len(samples)

    def test_loss_curve_length_and_finiteness(self):
        config = TrainConfig(epochs=3, seed=2)
        params = ModelParams.initialize(small_config(), seed=2)
        curve = train(params, samples_for(count=2, size=16), config)
        assert [c.epoch for c in curve] == [0, 1, 2]
        assert all(np.isfinite(c.mean_loss) for c in curve)
        assert all(c.max_delta_norm >= 0 for c in curve)

    def test_feedforward_mode_trains(self):
        config = TrainConfig(epochs=2, feedback_enabled=False, use_decay=False, seed=3)
        arch = small_config(feedback=False, use_decay=False)
        params = ModelParams.initialize(arch, seed=3)
        curve = train(params, samples_for(count=2, size=16), config)
        assert len(curve) == 2

    def test_flag_mismatch_rejected(self):
        config = TrainConfig(epochs=1, use_decay=False, seed=0)
        params = ModelParams.initialize(small_config(use_decay=True), seed=0)
        with pytest.raises(ContractError):
            train(params, samples_for(count=1), config)

    def test_empty_dataset_rejected(self):
        config = TrainConfig(epochs=1, seed=0)
        params = ModelParams.initialize(small_config(), seed=0)
        with pytest.raises(ContractError):
            train(params, [], config)

    def test_divergence_reports_location(self):
        config = TrainConfig(epochs=1, seed=0)
        params = ModelParams.initialize(small_config(), seed=0)
        params.out_w.values = np.full_like(params.out_w.values, np.nan)
        with pytest.raises(DivergenceError) as info:
            train(params, samples_for(count=1, size=16), config)
        assert info.value.epoch == 0 or info.value.step is not None

    def test_config_validation(self):
        with pytest.raises(ContractError):
            TrainConfig(epochs=0)
        with pytest.raises(ContractError):
            TrainConfig(batch_size=2)
