import json
import tracemalloc

import numpy as np
import pytest

from s6snn.errors import NonFiniteLossError
from s6snn.layers import Mode, ssm_conv_on_tape
from s6snn.model import NetworkConfig, S6Network
from s6snn.optim import AdamW, clip_grad_norm, cosine_lr
from s6snn.ssm import init_continuous
from s6snn.tape import Tape, matmul, mean_time, softmax_cross_entropy
from s6snn.tasks import SequenceDataset, gen_adding_task, gen_copy_task, split_dataset
from s6snn.trainer import Batch, derive_seed, evaluate, fit, train_step


def _random_dataset(count, L, classes, seed):
    rng = np.random.default_rng(seed)
    return SequenceDataset(
        inputs=rng.random((count, L, 1)),
        labels=rng.integers(0, classes, size=count),
        name="random",
        num_classes=classes,
    )


class TestOptimizer:
    def test_cosine_schedule(self):
        assert cosine_lr(0, 100, 1e-2) == pytest.approx(1e-2)
        assert cosine_lr(50, 100, 1e-2, 1e-4) == pytest.approx(0.5 * (1e-2 + 1e-4))
        assert cosine_lr(100, 100, 1e-2, 1e-4) == pytest.approx(1e-4)
        assert cosine_lr(5, 0, 3e-3) == 3e-3

    def test_first_step_is_lr_sign(self):
        params = {"x.W": np.array([1.0, -2.0]), "x.b": np.array([0.5])}
        opt = AdamW(params, lr=0.1)
        opt.step(params, {"x.W": np.array([3.0, -0.01]), "x.b": np.array([0.0])})
        np.testing.assert_allclose(params["x.W"], [0.9, -1.9], rtol=1e-6)
        np.testing.assert_allclose(params["x.b"], [0.5])
        assert opt.state.step == 1

    def test_decay_only_on_matrices(self):
        params = {"a.W": np.ones(2), "a.b": np.ones(2)}
        opt = AdamW(params, lr=0.1, weight_decay=0.5)
        opt.step(params, {"a.W": np.zeros(2), "a.b": np.zeros(2)})
        np.testing.assert_allclose(params["a.W"], 0.95)
        np.testing.assert_allclose(params["a.b"], 1.0)

    def test_clip_grad_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
        assert np.sqrt(grads["a"] ** 2 + grads["b"] ** 2).item() == pytest.approx(1.0, rel=1e-9)


class TestTrainStep:
    def _setup(self, tiny_model, lr=1e-2):
        model = tiny_model()
        ds = _random_dataset(8, 16, 3, seed=1)
        return model, Batch.from_dataset(ds), AdamW(model.params, lr=lr)

    def test_zero_lr_leaves_params(self, tiny_model):
        model, batch, opt = self._setup(tiny_model, lr=0.0)
        before = {k: v.copy() for k, v in model.params.items()}
        loss, metrics = train_step(model, batch, opt, seed=0)
        assert np.isfinite(loss)
        for k, v in before.items():
            np.testing.assert_array_equal(model.params[k], v)

    def test_identical_seeds_identical_losses(self, tiny_model):
        losses = []
        for _ in range(2):
            model, batch, opt = self._setup(tiny_model)
            losses.append([train_step(model, batch, opt, seed=s)[0] for s in (4, 5)])
        assert losses[0] == losses[1]

    def test_non_finite_names_layer(self, tiny_model):
        model, batch, opt = self._setup(tiny_model)
        model.params["block0.mixer.W"][0, 0] = np.nan
        before = {k: v.copy() for k, v in model.params.items()}
        with pytest.raises(NonFiniteLossError) as info:
            train_step(model, batch, opt, seed=0)
        assert info.value.layer == "block0.out"
        assert opt.state.step == 0
        for k, v in before.items():
            np.testing.assert_array_equal(model.params[k], v)

    def test_single_sample_overfit(self, tiny_model):
        model = tiny_model(num_neurons=8)
        ds = _random_dataset(1, 16, 3, seed=2)
        batch = Batch.from_dataset(ds)
        opt = AdamW(model.params, lr=0.05)
        for step in range(200):
            loss, _ = train_step(model, batch, opt, seed=step)
        assert loss < 1e-2
        metrics = evaluate(model, ds, Mode.EVAL_SAMPLE, repeats=4)
        assert metrics["accuracy"] == 1.0

    def test_expected_mode_ignores_sampler_seed(self, tiny_model):
        losses = []
        for seed in (1, 2):
            model, batch, opt = self._setup(tiny_model)
            losses.append(train_step(model, batch, opt, seed=seed, mode=Mode.EVAL_EXPECTED)[0])
        assert losses[0] == losses[1]

    def test_per_layer_kernels_stay_identical(self, tiny_model):
        model, batch, opt = self._setup(tiny_model)
        for s in range(3):
            train_step(model, batch, opt, seed=s)
        k = model.kernels(0, 16)
        for i in range(1, k.shape[0]):
            np.testing.assert_array_equal(k[i], k[0])


class TestEvaluate:
    def test_expected_mode_bit_identical(self, tiny_model):
        model = tiny_model()
        ds = _random_dataset(20, 16, 3, seed=3)
        a = evaluate(model, ds, Mode.EVAL_EXPECTED)
        b = evaluate(model, ds, Mode.EVAL_EXPECTED)
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
        assert a["repeats"] == 1

    def test_sampled_is_reproducible_across_workers(self, tiny_model):
        model = tiny_model()
        ds = _random_dataset(12, 16, 3, seed=4)
        one = evaluate(model, ds, Mode.EVAL_SAMPLE, repeats=4, seed=1, workers=1, batch_size=5)
        four = evaluate(model, ds, Mode.EVAL_SAMPLE, repeats=4, seed=1, workers=4, batch_size=5)
        assert one == four

    def test_untrained_near_chance(self):
        model = S6Network(NetworkConfig(num_blocks=1, num_neurons=8, state_dim=4, num_classes=10), seed=5)
        ds = _random_dataset(300, 16, 10, seed=5)
        acc = evaluate(model, ds, Mode.EVAL_SAMPLE, repeats=2)["accuracy"]
        assert 0.0 <= acc <= 0.25

    def test_per_step_accuracy_ignores_blanks(self):
        ds = gen_copy_task(6, 16, 4, seed=0)
        model = S6Network(
            NetworkConfig(num_blocks=1, num_neurons=4, state_dim=4, num_classes=8, decoder="per_step"), seed=0
        )
        metrics = evaluate(model, ds, Mode.EVAL_EXPECTED)
        assert 0.0 <= metrics["accuracy"] <= 1.0
        assert set(metrics["spike_rates"]) == set(model.layer_names)

    def test_empty_dataset(self, tiny_model):
        ds = _random_dataset(0, 16, 3, seed=0)
        assert evaluate(tiny_model(), ds)["count"] == 0


class TestFit:
    def test_metrics_file_is_deterministic(self, tmp_path):
        ds = gen_adding_task(40, 16, seed=0, bins=4)
        train, val, _ = split_dataset(ds, (0.6, 0.2, 0.2), seed=0)
        texts = []
        for run in range(2):
            model = S6Network(NetworkConfig(num_blocks=1, num_neurons=6, state_dim=4, input_features=2, num_classes=4), seed=0)
            path = tmp_path / f"m{run}.jsonl"
            fit(model, train, val, lr=1e-2, epochs=2, batch_size=8, seed=3, metrics_path=path)
            texts.append(path.read_text())
        assert texts[0] == texts[1]
        lines = texts[0].splitlines()
        assert len(lines) == 2 and "val_accuracy" in json.loads(lines[0])

    def test_early_stop_restores_best(self, tiny_model):
        model = tiny_model(norm="layer")
        ds = _random_dataset(16, 16, 3, seed=6)
        result = fit(model, ds, ds, lr=0.0, epochs=10, batch_size=8, patience=2)
        assert result.stopped_early
        assert len(result.history) == 3
        assert result.best_epoch == 0

    def test_derive_seed_stable(self):
        assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
        assert derive_seed(1, 2, 3) != derive_seed(1, 2, 4)

    def test_tracks_test_accuracy(self):
        ds = gen_adding_task(40, 16, seed=1, bins=4)
        train, val, test = split_dataset(ds, (0.6, 0.2, 0.2), seed=0)
        model = S6Network(NetworkConfig(num_blocks=1, num_neurons=6, state_dim=4, input_features=2, num_classes=4), seed=0)
        result = fit(model, train, val, lr=1e-2, epochs=2, batch_size=8, test_ds=test)
        assert all(0.0 <= r["test_accuracy"] <= 1.0 for r in result.history)


class TestLearningRegression:
    """A short run on an easy adding task has to clear the majority-class baseline."""

    def test_adding_beats_majority_class(self):
        ds = gen_adding_task(800, 16, seed=11, bins=2)
        train, val, test = split_dataset(ds, (0.8, 0.0, 0.2), seed=11)
        model = S6Network(
            NetworkConfig(
                num_blocks=1, num_neurons=16, state_dim=4, input_features=2, num_classes=2,
                param_sharing="per_neuron", decoder="last",
            ),
            seed=11,
        )
        fit(model, train, None, lr=0.02, epochs=20, batch_size=32, seed=11, mode=Mode.EVAL_EXPECTED)
        majority = np.bincount(test.labels, minlength=2).max() / len(test)
        acc = evaluate(model, test, Mode.EVAL_EXPECTED)["accuracy"]
        assert acc >= majority + 0.1


def _backward_peak(L: int) -> int:
    rng = np.random.default_rng(0)
    N, n = 8, 16
    ssm = init_continuous(n, 1, rng)
    tape = Tape()
    s = tape.leaf((rng.random((2, L, N)) < 0.3).astype(float))
    A, B, C, ld = (tape.leaf(v) for v in (ssm.A, ssm.B, ssm.C, ssm.log_delta))
    y = ssm_conv_on_tape(tape, s, A, B, C, ld)
    loss = softmax_cross_entropy(tape, matmul(tape, mean_time(tape, y), tape.leaf(rng.normal(size=(N, 2)))), np.array([0, 1]))
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        tape.backward(loss)
        peak = tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()
    return peak - base


class TestMemory:
    def test_backward_memory_linear_in_length(self):
        small, large = _backward_peak(256), _backward_peak(4096)
        ratio = large / small
        assert 16 * 0.8 <= ratio <= 16 * 1.2, ratio
