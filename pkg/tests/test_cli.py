import json
from pathlib import Path

import pytest

import orchestrator
from s6snn.checkpoint import load_checkpoint, save_checkpoint
from s6snn.config import PROJECT_ROOT, load_config
from s6snn.layers import Mode
from s6snn.model import NetworkConfig, S6Network
from s6snn.tasks import load_dataset
from s6snn.trainer import evaluate

SMOKE = str(PROJECT_ROOT / "configs" / "smoke.json")


@pytest.fixture(autouse=True)
def isolated_dirs(tmp_path, monkeypatch):
    monkeypatch.setenv("S6_LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.setenv("S6_REPORT_DIR", str(tmp_path / "reports"))
    monkeypatch.setenv("S6_OUTPUT_ROOT", str(tmp_path / "runs"))


@pytest.fixture
def smoke_run(tmp_path):
    out = tmp_path / "smoke"
    assert orchestrator.main(["train", SMOKE, "--set", f"output_dir={out}"]) == 0
    return out


@pytest.fixture
def adding_data(tmp_path):
    path = tmp_path / "adding.s6t"
    args = ["gen-data", "adding", str(path), "--count", "12", "--length", "32", "--bins", "4", "--seed", "5"]
    assert orchestrator.main(args) == 0
    return path


class TestGenData:
    def test_identical_bytes(self, tmp_path):
        paths = [tmp_path / "a.s6t", tmp_path / "b.s6t"]
        for p in paths:
            assert orchestrator.main(["gen-data", "copy", str(p), "--count", "4", "--length", "16", "--lag", "4"]) == 0
        assert paths[0].read_bytes() == paths[1].read_bytes()
        ds = load_dataset(paths[0])
        assert ds.per_step and ds.inputs.shape == (4, 16, 1)

    def test_zero_count(self, tmp_path):
        path = tmp_path / "empty.s6t"
        assert orchestrator.main(["gen-data", "adding", str(path), "--count", "0", "--length", "16"]) == 0
        assert len(load_dataset(path)) == 0

    def test_invalid_length_exits_2(self, tmp_path):
        assert orchestrator.main(["gen-data", "adding", str(tmp_path / "x.s6t"), "--length", "4"]) == 2

    def test_copy_dwell(self, tmp_path):
        path = tmp_path / "dwell.s6t"
        args = ["gen-data", "copy", str(path), "--count", "3", "--length", "32", "--lag", "8", "--dwell", "4"]
        assert orchestrator.main(args) == 0
        tokens = load_dataset(path).inputs[:, :8, 0]
        assert (tokens[:, ::4] == tokens[:, 3::4]).all()


class TestTrain:
    def test_smoke_outputs(self, smoke_run):
        assert (smoke_run / "checkpoint.s6t").exists()
        lines = (smoke_run / "metrics.jsonl").read_text().splitlines()
        assert len(lines) >= 1
        manifest = json.loads((smoke_run / "manifest.json").read_text())
        assert manifest["seed"] == 0 and manifest["command"] == "train"
        model, header = load_checkpoint(smoke_run / "checkpoint.s6t")
        assert model.cfg.input_features == 2 and model.cfg.num_classes == 4
        assert header["step"] > 0

    def test_rerun_is_identical(self, smoke_run, tmp_path):
        again = tmp_path / "again"
        assert orchestrator.main(["train", SMOKE, "--set", f"output_dir={again}"]) == 0
        assert (again / "metrics.jsonl").read_bytes() == (smoke_run / "metrics.jsonl").read_bytes()

    def test_missing_config_exits_2(self, tmp_path):
        assert orchestrator.main(["train", str(tmp_path / "nope.json")]) == 2

    def test_bad_override_exits_2(self, tmp_path):
        assert orchestrator.main(["train", SMOKE, "--set", "model.norm=group"]) == 2

    def test_seeds_writes_mean_and_std(self, tmp_path):
        out = tmp_path / "multi"
        assert orchestrator.main(["train", SMOKE, "--seeds", "2", "--set", f"output_dir={out}"]) == 0
        assert (out / "seed0" / "checkpoint.s6t").exists() and (out / "seed1" / "checkpoint.s6t").exists()
        assert len((out / "seeds.csv").read_text().splitlines()) == 3
        summary = json.loads((out / "seeds.json").read_text())
        assert summary["seeds"] == [0, 1]
        assert summary["accuracy"]["std"] >= 0.0 and 0.0 <= summary["accuracy"]["mean"] <= 1.0
        assert "Seeds" in (tmp_path / "reports" / "smoke_summary.md").read_text()

    def test_zero_seeds_exits_2(self, tmp_path):
        assert orchestrator.main(["train", SMOKE, "--seeds", "0", "--set", f"output_dir={tmp_path / 'z'}"]) == 2


class TestEval:
    def test_missing_data_exits_2(self, smoke_run, tmp_path):
        code = orchestrator.main(["eval", str(smoke_run / "checkpoint.s6t"), "--data", str(tmp_path / "none.s6t")])
        assert code == 2

    def test_corrupted_checkpoint_exits_3(self, smoke_run, adding_data):
        ckpt = smoke_run / "checkpoint.s6t"
        data = bytearray(ckpt.read_bytes())
        data[-2] ^= 0xFF
        ckpt.write_bytes(bytes(data))
        assert orchestrator.main(["eval", str(ckpt), "--data", str(adding_data)]) == 3

    def test_incompatible_data_exits_3(self, smoke_run, tmp_path):
        copy = tmp_path / "copy.s6t"
        assert orchestrator.main(["gen-data", "copy", str(copy), "--count", "3", "--length", "16", "--lag", "4"]) == 0
        assert orchestrator.main(["eval", str(smoke_run / "checkpoint.s6t"), "--data", str(copy)]) == 3

    def test_expected_mode_identical_json(self, smoke_run, adding_data, tmp_path):
        outs = [tmp_path / "e1.json", tmp_path / "e2.json"]
        for out in outs:
            args = ["eval", str(smoke_run / "checkpoint.s6t"), "--data", str(adding_data), "--mode", "eval_expected", "--out", str(out)]
            assert orchestrator.main(args) == 0
        assert outs[0].read_text() == outs[1].read_text()
        metrics = json.loads(outs[0].read_text())
        assert metrics["mode"] == "eval_expected" and metrics["count"] == 12
        assert 0.0 <= metrics["accuracy"] <= 1.0

    def test_sampled_repeats(self, smoke_run, adding_data, tmp_path):
        out = tmp_path / "e.json"
        args = ["eval", str(smoke_run / "checkpoint.s6t"), "--data", str(adding_data), "--repeats", "3", "--out", str(out)]
        assert orchestrator.main(args) == 0
        assert json.loads(out.read_text())["repeats"] == 3


class TestAnalyze:
    def test_outputs(self, smoke_run, adding_data, tmp_path):
        out = tmp_path / "analysis"
        args = ["analyze", str(smoke_run / "checkpoint.s6t"), "--data", str(adding_data), "--out", str(out), "--set", "analysis.runs=2"]
        assert orchestrator.main(args) == 0
        for name in ("raster.csv", "activity.csv", "histogram.json", "energy.json"):
            assert (out / name).exists()
        energy = json.loads((out / "energy.json").read_text())
        assert energy["norm_ops"] >= 0.0

    def test_silent_model_reports_inf(self, tmp_path, adding_data):
        model = S6Network(NetworkConfig(num_blocks=1, num_neurons=4, state_dim=4, input_features=2, num_classes=4))
        model.params["encoder.W"][:] = 0.0
        model.params["encoder.b"][:] = -5.0
        ckpt = save_checkpoint(tmp_path / "silent.s6t", model)
        out = tmp_path / "silent"
        args = ["analyze", str(ckpt), "--data", str(adding_data), "--out", str(out), "--set", "analysis.runs=2"]
        assert orchestrator.main(args) == 0
        energy = json.loads((out / "energy.json").read_text())
        assert energy["efficiency_factor"] == "inf"
        assert energy["norm_ops"] == 0.0


class TestPipeline:
    def test_smoke_pipeline(self, tmp_path):
        out = tmp_path / "pipe"
        assert orchestrator.main(["pipeline", SMOKE, "--set", f"output_dir={out}"]) == 0
        for name in ("data.s6t", "checkpoint.s6t", "metrics.jsonl", "eval.json", "analysis/energy.json"):
            assert (out / name).exists(), name
        digest = (tmp_path / "reports" / "smoke_summary.md").read_text()
        assert "Norm#OPS" in digest and "Accuracy" in digest
        assert (tmp_path / "logs" / "smoke.log").exists()

    def test_trains_from_written_dataset(self, tmp_path, monkeypatch):
        loaded = []
        real = orchestrator.load_dataset

        def spy(path):
            loaded.append(Path(path).name)
            return real(path)

        monkeypatch.setattr(orchestrator, "load_dataset", spy)
        out = tmp_path / "pipe"
        assert orchestrator.main(["pipeline", SMOKE, "--set", f"output_dir={out}"]) == 0
        assert "data.s6t" in loaded
        plain = tmp_path / "plain"
        assert orchestrator.main(["train", SMOKE, "--set", f"output_dir={plain}"]) == 0
        assert (out / "metrics.jsonl").read_bytes() == (plain / "metrics.jsonl").read_bytes()


def _desk_run(name: str, tmp_path, overrides=()):
    cfg = load_config(PROJECT_ROOT / "configs" / name, [f"output_dir={tmp_path / 'run'}", *overrides])
    trained = orchestrator.cmd_train(cfg)
    e = cfg.eval
    return evaluate(trained["model"], trained["test"], Mode(e.mode), e.repeats, cfg.training.seed, e.batch_size, e.workers)


@pytest.mark.slow
class TestDeskScaleLearning:
    def test_copy_task(self, tmp_path):
        assert _desk_run("copy.json", tmp_path)["accuracy"] >= 0.95

    def test_adding_task(self, tmp_path):
        assert _desk_run("adding.json", tmp_path)["accuracy"] >= 0.90

    def test_permuted_mnist_subset(self, tmp_path):
        cfg = load_config(PROJECT_ROOT / "configs" / "psmnist.json")
        mnist = orchestrator.data_dir() / "mnist" / "train-images-idx3-ubyte.gz"
        if not mnist.exists() or not (PROJECT_ROOT / cfg.data.test_images).exists():
            pytest.skip("MNIST files not downloaded (run orchestrator.py fetch-mnist)")
        overrides = [
            f"data.test_images={PROJECT_ROOT / cfg.data.test_images}",
            f"data.test_labels={PROJECT_ROOT / cfg.data.test_labels}",
        ]
        assert _desk_run("psmnist.json", tmp_path, overrides)["accuracy"] >= 0.80
