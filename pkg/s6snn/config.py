"""Config — RunConfig loading, dotted overrides, range checks and run manifests.

A run is described by one JSON document:

    {"run_name": ..., "output_dir": ..., "strict_ranges": true,
     "model": {...}, "training": {...}, "data": {...}, "eval": {...}, "analysis": {...}}

Unknown keys anywhere are rejected. Missing keys take the dataclass defaults.
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from s6snn import __version__
from s6snn.errors import ConfigInvalidError, DataMissingError

logger = logging.getLogger(__name__)

PROJECT_ROOT = Path(__file__).resolve().parent.parent

TASKS = ("copy", "adding", "mnist", "file")

# Hyper-parameter ranges of the reference S6 models
RANGES = {
    "model.num_blocks": (2, 6),
    "model.num_neurons": (64, 400),
    "model.state_dim": (4, 64),
    "training.lr": (1e-4, 1e-1),
    "training.batch_size": (8, 256),
    "training.epochs": (1, 200),
}


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 2
    num_neurons: int = 128
    state_dim: int = 16
    param_sharing: str = "per_layer"
    norm: str = "batch"
    residual: bool = True
    sigma: str = "clip"
    encoder_norm: bool = False
    decoder: str = "pool"


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    weight_decay: float = 0.01
    lr_min: float = 0.0
    grad_clip: float = 1.0
    patience: int = 0
    mode: str = "train_sample"
    track_test: bool = False


@dataclass(frozen=True)
class DataConfig:
    task: str = "adding"
    seed: int | None = None
    path: str | None = None
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    permute: bool = False
    permutation_seed: int = 42
    length: int = 256
    lag: int = 128
    dwell: int = 1
    count: int = 1000
    bins: int = 10
    vocab: int = 8
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1)
    subset: int = 0


@dataclass(frozen=True)
class EvalConfig:
    mode: str = "eval_sample"
    repeats: int = 8
    batch_size: int = 64
    workers: int = 1


@dataclass(frozen=True)
class AnalysisConfig:
    samples: int = 16
    runs: int = 20
    bins: int = 20
    bandwidth: float = 0.05
    kde_points: int = 256


@dataclass(frozen=True)
class RunConfig:
    run_name: str = "run"
    output_dir: str | None = None
    strict_ranges: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    @property
    def data_seed(self) -> int:
        """Seed for dataset generation and splits; the root seed unless data.seed is set."""
        return self.training.seed if self.data.seed is None else self.data.seed

    @property
    def run_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return output_root() / self.run_name

    def to_dict(self) -> dict:
        return asdict(self)


def output_root() -> Path:
    return Path(os.getenv("S6_OUTPUT_ROOT", str(PROJECT_ROOT / "runs")))


def data_dir() -> Path:
    return Path(os.getenv("S6_DATA_DIR", str(PROJECT_ROOT / "data")))


def log_dir() -> Path:
    return Path(os.getenv("S6_LOG_DIR", str(PROJECT_ROOT / "logs")))


def report_dir() -> Path:
    return Path(os.getenv("S6_REPORT_DIR", str(PROJECT_ROOT / "reports")))


def _build(cls, raw: dict, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigInvalidError(f"{prefix or 'config'} must be a JSON object, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigInvalidError(f"unknown config key {prefix}{unknown[0]}")
    kwargs = {}
    for name, value in raw.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else known[name].default
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        elif name == "splits":
            if not isinstance(value, (list, tuple)) or len(value) != 3:
                raise ConfigInvalidError(f"{prefix}splits must be three fractions, got {value!r}")
            kwargs[name] = tuple(float(v) for v in value)
        else:
            kwargs[name] = _coerce(value, default, f"{prefix}{name}")
    return cls(**kwargs)


def _coerce(value, default, key: str):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigInvalidError(f"{key} must be true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigInvalidError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigInvalidError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigInvalidError(f"{key} must be a string, got {value!r}")
    return value


def parse_override(item: str) -> tuple[list[str], object]:
    """'training.lr=0.01' -> (['training', 'lr'], 0.01). Values are JSON, else plain strings."""
    if "=" not in item:
        raise ConfigInvalidError(f"override must look like key.sub=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    raw = json.loads(json.dumps(raw))
    for item in overrides or []:
        path, value = parse_override(item)
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigInvalidError(f"cannot override inside non-object key {item!r}")
        node[path[-1]] = value
    return raw


def validate(cfg: RunConfig) -> list[str]:
    """Check enums and the reference hyper-parameter ranges.

    Returns range violations; raises ConfigInvalidError for them when
    ``strict_ranges`` is on, and always for structural problems.
    """
    m, d, e = cfg.model, cfg.data, cfg.eval
    choices = {
        "model.param_sharing": (m.param_sharing, ("per_layer", "per_neuron")),
        "model.norm": (m.norm, ("batch", "layer")),
        "model.sigma": (m.sigma, ("clip", "logistic")),
        "model.decoder": (m.decoder, ("pool", "per_step", "last")),
        "training.mode": (cfg.training.mode, ("train_sample", "eval_expected")),
        "data.task": (d.task, TASKS),
        "eval.mode": (e.mode, ("eval_sample", "eval_expected")),
    }
    for key, (value, allowed) in choices.items():
        if value not in allowed:
            raise ConfigInvalidError(f"{key}={value!r} is not one of {list(allowed)}")
    if min(m.num_blocks, m.num_neurons, m.state_dim) < 1:
        raise ConfigInvalidError("model.num_blocks, num_neurons and state_dim must be >= 1")
    if cfg.training.batch_size < 1 or cfg.training.epochs < 0 or e.repeats < 1:
        raise ConfigInvalidError("training.batch_size, eval.repeats must be >= 1 and training.epochs >= 0")
    if d.seed is not None and (isinstance(d.seed, bool) or not isinstance(d.seed, int)):
        raise ConfigInvalidError(f"data.seed must be an integer or null, got {d.seed!r}")
    if d.dwell < 1:
        raise ConfigInvalidError(f"data.dwell must be >= 1, got {d.dwell}")
    if d.task == "copy" and m.decoder != "per_step":
        raise ConfigInvalidError("the copy task has per-step targets; set model.decoder to 'per_step'")

    flat = {f"{section}.{k}": v for section in ("model", "training") for k, v in asdict(getattr(cfg, section)).items()}
    problems = []
    for key, (lo, hi) in RANGES.items():
        if not lo <= flat[key] <= hi:
            problems.append(f"{key}={flat[key]} outside [{lo}, {hi}]")
    if problems:
        if cfg.strict_ranges:
            raise ConfigInvalidError("; ".join(problems) + " (set strict_ranges=false to allow)")
        for p in problems:
            logger.warning("Config %s", p)
    return problems


def load_config(path: Path | None, overrides: list[str] | None = None) -> RunConfig:
    if path is None:
        raw = {}
    else:
        path = Path(path)
        if not path.exists():
            raise DataMissingError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigInvalidError(f"{path} is not valid JSON: {exc}") from exc
    cfg = _build(RunConfig, apply_overrides(raw, overrides or []), "")
    validate(cfg)
    return cfg


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_manifest(cfg: RunConfig, command: str, out_dir: Path | None = None, extra: dict | None = None) -> Path:
    """Record what is needed to reproduce the run: config hash, root seed, version, command."""
    out_dir = Path(out_dir or cfg.run_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config_sha256": config_hash(cfg),
        "seed": cfg.training.seed,
        "package_version": __version__,
        "command": command,
        "config": cfg.to_dict(),
        **(extra or {}),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path

