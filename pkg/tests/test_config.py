import json

import pytest

from s6snn.config import (
    RunConfig,
    apply_overrides,
    config_hash,
    load_config,
    parse_override,
    write_manifest,
)
from s6snn.errors import ConfigInvalidError, DataMissingError


def _write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


class TestLoadConfig:
    def test_defaults_are_valid(self):
        cfg = load_config(None)
        assert cfg == RunConfig()
        assert cfg.data.task == "adding" and cfg.model.decoder == "pool"

    def test_sections_merge_with_defaults(self, tmp_path):
        cfg = load_config(_write(tmp_path, {"run_name": "x", "training": {"lr": 0.01}}))
        assert cfg.run_name == "x"
        assert cfg.training.lr == 0.01
        assert cfg.training.batch_size == 32

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigInvalidError, match="model.width"):
            load_config(_write(tmp_path, {"model": {"width": 3}}))

    def test_wrong_type(self, tmp_path):
        with pytest.raises(ConfigInvalidError):
            load_config(_write(tmp_path, {"training": {"epochs": "ten"}}))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataMissingError):
            load_config(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigInvalidError):
            load_config(path)

    def test_exit_codes(self):
        assert ConfigInvalidError("x").exit_code == 2
        assert DataMissingError("x").exit_code == 2


class TestOverrides:
    def test_parse(self):
        assert parse_override("training.lr=0.01") == (["training", "lr"], 0.01)
        assert parse_override("run_name=abc") == (["run_name"], "abc")
        assert parse_override("model.residual=false") == (["model", "residual"], False)

    def test_malformed(self):
        with pytest.raises(ConfigInvalidError):
            parse_override("training.lr")

    def test_apply_does_not_mutate(self):
        raw = {"training": {"lr": 0.1}}
        out = apply_overrides(raw, ["training.lr=0.2", "data.length=64"])
        assert raw == {"training": {"lr": 0.1}}
        assert out == {"training": {"lr": 0.2}, "data": {"length": 64}}

    def test_override_wins_over_file(self, tmp_path):
        path = _write(tmp_path, {"training": {"epochs": 3}})
        assert load_config(path, ["training.epochs=5"]).training.epochs == 5


class TestValidation:
    def test_strict_range(self):
        with pytest.raises(ConfigInvalidError, match="model.num_neurons"):
            load_config(None, ["model.num_neurons=8"])

    def test_lenient_range_warns(self, caplog):
        cfg = load_config(None, ["model.num_neurons=8", "strict_ranges=false"])
        assert cfg.model.num_neurons == 8
        assert "model.num_neurons" in caplog.text

    def test_enum(self):
        with pytest.raises(ConfigInvalidError):
            load_config(None, ["model.norm=group"])

    def test_copy_needs_per_step_decoder(self):
        with pytest.raises(ConfigInvalidError, match="per_step"):
            load_config(None, ["data.task=copy"])
        assert load_config(None, ["data.task=copy", "model.decoder=per_step"]).data.task == "copy"

    def test_training_mode_and_readout(self):
        cfg = load_config(None, ["training.mode=eval_expected", "model.decoder=last"])
        assert cfg.training.mode == "eval_expected" and cfg.model.decoder == "last"
        with pytest.raises(ConfigInvalidError, match="training.mode"):
            load_config(None, ["training.mode=eval_sample"])

    def test_data_seed_falls_back_to_root_seed(self):
        assert load_config(None, ["training.seed=4"]).data_seed == 4
        assert load_config(None, ["training.seed=4", "data.seed=9"]).data_seed == 9
        with pytest.raises(ConfigInvalidError, match="data.seed"):
            load_config(None, ["data.seed=abc"])

    def test_dwell_must_be_positive(self):
        with pytest.raises(ConfigInvalidError, match="dwell"):
            load_config(None, ["data.dwell=0"])

    def test_bundled_configs_load(self):
        from s6snn.config import PROJECT_ROOT

        for path in sorted((PROJECT_ROOT / "configs").glob("*.json")):
            load_config(path)


class TestManifest:
    def test_hash_is_stable(self):
        assert config_hash(RunConfig()) == config_hash(RunConfig())
        assert config_hash(RunConfig()) != config_hash(RunConfig(run_name="other"))

    def test_manifest(self, tmp_path):
        cfg = load_config(None, ["training.seed=7"])
        path = write_manifest(cfg, "train cfg.json", tmp_path)
        doc = json.loads(path.read_text())
        assert doc["seed"] == 7
        assert doc["command"] == "train cfg.json"
        assert doc["config_sha256"] == config_hash(cfg)
        assert doc["config"]["training"]["seed"] == 7
