"""Orchestrator — command-line entry point for the S6 sequence engine.

Commands:
    train <config>          fit a model, write checkpoint + metrics.jsonl + manifest;
                            --seeds K trains K seeds and reports mean/std
    eval <checkpoint>       accuracy / loss / spike rates on a dataset
    analyze <checkpoint>    raster + activity CSVs, histogram/KDE and energy JSON
    gen-data <task> <out>   write a synthetic dataset container
    fetch-mnist             download the MNIST IDX files
    pipeline <config>       gen-data -> train -> eval -> analyze -> digest

Config keys are overridden with ``--set section.key=value``. Exit codes: 0 ok,
1 internal error, 2 config/data error, 3 integrity error.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import pandas as pd
from dotenv import load_dotenv

# Project root is wherever this file lives
PROJECT_ROOT = Path(__file__).resolve().parent

# Load env vars before importing the package (paths are read from the environment)
load_dotenv(PROJECT_ROOT / ".env")

from s6snn import __version__, report
from s6snn.analysis import collect_traces, model_energy_report, spike_stats, write_bundle
from s6snn.checkpoint import load_checkpoint, save_checkpoint
from s6snn.config import RunConfig, data_dir, load_config, log_dir, report_dir, write_manifest
from s6snn.errors import ConfigInvalidError, DataMissingError, S6Error, ShapeIncompatibleError
from s6snn.model import NetworkConfig, S6Network
from s6snn.tasks import (
    SequenceDataset,
    fetch_mnist,
    gen_adding_task,
    gen_copy_task,
    load_dataset,
    load_mnist_idx,
    permute,
    save_dataset,
    split_dataset,
)
from s6snn.trainer import evaluate, fit

logger = logging.getLogger("orchestrator")

CHECKPOINT_NAME = "checkpoint.s6t"


def _setup_logging(run_name: str) -> None:
    """Configure logging to both file and stdout."""
    logs = log_dir()
    logs.mkdir(parents=True, exist_ok=True)

    root_logger = logging.getLogger()
    root_logger.setLevel(logging.INFO)

    # Clear any existing handlers to avoid duplicates on re-runs
    for handler in list(root_logger.handlers):
        root_logger.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter("%(asctime)s [%(name)s] %(levelname)s %(message)s")

    file_handler = logging.FileHandler(logs / f"{run_name}.log", encoding="utf-8")
    file_handler.setFormatter(formatter)
    root_logger.addHandler(file_handler)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)


def _banner(title: str) -> None:
    logger.info("=" * 60)
    logger.info("S6 %s — %s", __version__, title)
    logger.info("=" * 60)


# --- data ---


def _synthetic(cfg: RunConfig) -> SequenceDataset:
    d = cfg.data
    if d.task == "copy":
        return gen_copy_task(d.count, d.length, d.lag, cfg.data_seed, vocab=d.vocab, dwell=d.dwell)
    return gen_adding_task(d.count, d.length, cfg.data_seed, bins=d.bins)


def prepare_data(
    cfg: RunConfig, data_path: Path | None = None
) -> tuple[SequenceDataset, SequenceDataset, SequenceDataset]:
    """Resolve the configured task into (train, val, test) datasets.

    ``data_path`` names an already written dataset container to split instead
    of generating or loading the configured task.
    """
    d = cfg.data
    seed = cfg.data_seed
    if data_path is not None:
        return split_dataset(load_dataset(data_path), d.splits, seed)
    if d.task in ("copy", "adding"):
        return split_dataset(_synthetic(cfg), d.splits, seed)
    if d.task == "file":
        if not d.path:
            raise DataMissingError("data.task is 'file' but data.path is not set")
        return split_dataset(load_dataset(Path(d.path)), d.splits, seed)

    mnist_dir = data_dir() / "mnist"
    images = Path(d.images) if d.images else mnist_dir / "train-images-idx3-ubyte.gz"
    labels = Path(d.labels) if d.labels else mnist_dir / "train-labels-idx1-ubyte.gz"
    full = load_mnist_idx(images, labels)
    if d.subset:
        full = full.subset(range(min(d.subset, len(full))))
    perm_seed = d.permutation_seed if d.permute else None
    full = permute(full, perm_seed)
    if d.test_images and d.test_labels:
        test = permute(load_mnist_idx(Path(d.test_images), Path(d.test_labels)), perm_seed)
        train_f, val_f, _ = d.splits
        train, val, _ = split_dataset(full, (train_f / (train_f + val_f), val_f / (train_f + val_f), 0.0), seed)
        return train, val, test
    return split_dataset(full, d.splits, seed)


def _network_config(cfg: RunConfig, ds: SequenceDataset) -> NetworkConfig:
    m = cfg.model
    return NetworkConfig(
        num_blocks=m.num_blocks,
        num_neurons=m.num_neurons,
        state_dim=m.state_dim,
        input_features=ds.features,
        num_classes=ds.num_classes,
        param_sharing=m.param_sharing,
        norm=m.norm,
        residual=m.residual,
        sigma=m.sigma,
        encoder_norm=m.encoder_norm,
        decoder="per_step" if ds.per_step else m.decoder,
    )


def _check_compatible(model: S6Network, ds: SequenceDataset) -> None:
    if ds.features != model.cfg.input_features or ds.num_classes != model.cfg.num_classes:
        raise ShapeIncompatibleError(
            f"dataset has F={ds.features}, C={ds.num_classes}; "
            f"checkpoint expects F={model.cfg.input_features}, C={model.cfg.num_classes}"
        )
    if ds.per_step != (model.cfg.decoder == "per_step"):
        raise ShapeIncompatibleError("dataset target layout does not match the checkpoint's decoder")


def _write_json(path: Path, doc: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    return path


# --- commands ---


def cmd_train(cfg: RunConfig, command: str = "train", data_path: Path | None = None) -> dict:
    run_dir = cfg.run_dir
    write_manifest(cfg, command, run_dir)
    train, val, test = prepare_data(cfg, data_path)
    logger.info("Data: %d train / %d val / %d test sequences of length %d", len(train), len(val), len(test), train.length)
    model = S6Network(_network_config(cfg, train), seed=cfg.training.seed)
    t = cfg.training
    logger.info("Training in %s mode for %d epochs", t.mode, t.epochs)
    result = fit(
        model, train, val,
        lr=t.lr, epochs=t.epochs, batch_size=t.batch_size, seed=t.seed,
        weight_decay=t.weight_decay, lr_min=t.lr_min, grad_clip=t.grad_clip, patience=t.patience,
        metrics_path=run_dir / "metrics.jsonl", mode=t.mode,
        test_ds=test if t.track_test else None,
    )
    ckpt = save_checkpoint(
        run_dir / CHECKPOINT_NAME, model, config=cfg.to_dict(), seed=t.seed, step=result.steps,
        metadata={"best_epoch": result.best_epoch, "stopped_early": result.stopped_early},
    )
    logger.info("Checkpoint saved to %s", ckpt)
    return {"model": model, "history": result.history, "test": test, "checkpoint": ckpt, "best_epoch": result.best_epoch}


def cmd_train_seeds(cfg: RunConfig, seeds: int, command: str = "train") -> dict:
    """Train and evaluate ``seeds`` runs that differ only in the root seed.

    Every run shares the dataset (drawn with the base run's data seed) and
    lives in run_dir/seed{k}/. Per-seed test metrics go to seeds.csv, their
    mean and sample std to seeds.json and the digest.
    """
    run_dir = cfg.run_dir
    base = cfg.training.seed
    data = replace(cfg.data, seed=cfg.data_seed)
    write_manifest(cfg, f"{command} --seeds {seeds}", run_dir, extra={"seeds": list(range(base, base + seeds))})
    e = cfg.eval
    rows = []
    for k in range(base, base + seeds):
        logger.info("Seed %d (%d of %d)", k, k - base + 1, seeds)
        sub = replace(cfg, output_dir=str(run_dir / f"seed{k}"), data=data, training=replace(cfg.training, seed=k))
        trained = cmd_train(sub, command=command)
        metrics = evaluate(trained["model"], trained["test"], e.mode, e.repeats, k, e.batch_size, e.workers)
        rows.append({
            "seed": k,
            "accuracy": metrics["accuracy"],
            "macro_f1": metrics["macro_f1"],
            "loss": metrics["loss"],
            "best_epoch": trained["best_epoch"],
        })

    df = pd.DataFrame(rows)
    run_dir.mkdir(parents=True, exist_ok=True)
    df.to_csv(run_dir / "seeds.csv", index=False)
    stats = df[["accuracy", "macro_f1", "loss"]].agg(["mean", "std"]).fillna(0.0)
    summary = {
        "seeds": df["seed"].tolist(),
        "mode": e.mode,
        **{metric: {"mean": float(stats.at["mean", metric]), "std": float(stats.at["std", metric])} for metric in stats.columns},
    }
    _write_json(run_dir / "seeds.json", summary)
    logger.info(
        "Accuracy over %d seeds: %.4f ± %.4f", seeds, summary["accuracy"]["mean"], summary["accuracy"]["std"]
    )
    report.run(cfg.run_name, cfg.to_dict(), seed_summary=summary, reports_dir=report_dir())
    return summary


def _eval_dataset(cfg: RunConfig | None, data_path: Path | None) -> SequenceDataset:
    if data_path is not None:
        return load_dataset(data_path)
    if cfg is None:
        raise DataMissingError("eval/analyze need --data or --config")
    return prepare_data(cfg)[2]


def cmd_eval(
    checkpoint: Path,
    ds: SequenceDataset,
    mode: str,
    repeats: int,
    seed: int,
    batch_size: int,
    workers: int,
    out: Path | None = None,
) -> dict:
    model, _ = load_checkpoint(checkpoint)
    _check_compatible(model, ds)
    metrics = evaluate(model, ds, mode=mode, repeats=repeats, seed=seed, batch_size=batch_size, workers=workers)
    logger.info("Eval (%s, R=%d): accuracy %.4f loss %.4f", metrics["mode"], metrics["repeats"], metrics["accuracy"], metrics["loss"])
    if out is not None:
        _write_json(out, metrics)
    return metrics


def cmd_analyze(checkpoint: Path, ds: SequenceDataset, out_dir: Path, cfg: RunConfig, mode: str = "eval_sample") -> dict:
    model, _ = load_checkpoint(checkpoint)
    _check_compatible(model, ds)
    a = cfg.analysis
    traces = collect_traces(model, ds, runs=a.runs, samples=a.samples, seed=cfg.training.seed, mode=mode)
    stats = spike_stats(traces, bins=a.bins)
    energy = model_energy_report(model, stats, ds.length)
    write_bundle(out_dir, stats, energy, bandwidth=a.bandwidth, kde_points=a.kde_points)
    logger.info("Norm#OPS %.4f, e = %s", energy.norm_ops, energy.to_dict()["efficiency_factor"])
    return energy.to_dict()


def cmd_gen_data(
    task: str, out: Path, count: int, length: int, lag: int, seed: int, bins: int, vocab: int, dwell: int = 1
) -> Path:
    if task == "copy":
        ds = gen_copy_task(count, length, lag, seed, vocab=vocab, dwell=dwell)
    else:
        ds = gen_adding_task(count, length, seed, bins=bins)
    path = save_dataset(ds, out)
    logger.info("Wrote %d %s sequences (L=%d) to %s", len(ds), task, length, path)
    return path


def cmd_pipeline(cfg: RunConfig) -> int:
    run_dir = cfg.run_dir

    logger.info("Stage 1/5: Data")
    data_path = None
    if cfg.data.task in ("copy", "adding"):
        data_path = save_dataset(_synthetic(cfg), run_dir / "data.s6t")
        logger.info("Dataset written to %s", data_path)

    logger.info("Stage 2/5: Train")
    try:
        trained = cmd_train(cfg, command="pipeline", data_path=data_path)
    except Exception as exc:
        logger.error("Training failed: %s", exc, exc_info=True)
        logger.info("Pipeline aborted — no checkpoint to evaluate")
        raise

    logger.info("Stage 3/5: Eval")
    e = cfg.eval
    metrics = None
    try:
        metrics = cmd_eval(
            trained["checkpoint"], trained["test"], e.mode, e.repeats, cfg.training.seed,
            e.batch_size, e.workers, out=run_dir / "eval.json",
        )
    except Exception as exc:
        logger.error("Evaluation failed: %s", exc, exc_info=True)

    logger.info("Stage 4/5: Analyze")
    energy = None
    try:
        energy = cmd_analyze(trained["checkpoint"], trained["test"], run_dir / "analysis", cfg)
    except Exception as exc:
        logger.error("Analysis failed: %s", exc, exc_info=True)
        logger.info("Continuing without energy report")

    logger.info("Stage 5/5: Digest")
    report.run(cfg.run_name, cfg.to_dict(), trained["history"], metrics, energy, reports_dir=report_dir())
    return 0


# --- argument parsing ---


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="orchestrator.py", description="S6 spiking state-space sequence engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("config", type=Path)
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    add_config(sub.add_parser("train", help="train a model"))
    sub.choices["train"].add_argument(
        "--seeds", type=int, default=1, help="train this many runs (root seed, root seed + 1, ...) and aggregate"
    )
    add_config(sub.add_parser("pipeline", help="data -> train -> eval -> analyze -> digest"))

    for name in ("eval", "analyze"):
        p = sub.add_parser(name)
        p.add_argument("checkpoint", type=Path)
        p.add_argument("--data", type=Path, help="dataset container; defaults to the config's test split")
        p.add_argument("--config", type=Path)
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--mode", choices=["eval_sample", "eval_expected"])
        p.add_argument("--out", type=Path)
    sub.choices["eval"].add_argument("--repeats", type=int)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("task", choices=["copy", "adding"])
    g.add_argument("out", type=Path)
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--length", type=int, default=256)
    g.add_argument("--lag", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--bins", type=int, default=10)
    g.add_argument("--vocab", type=int, default=8)
    g.add_argument("--dwell", type=int, default=1, help="copy task: steps each token is held")

    f = sub.add_parser("fetch-mnist", help="download the MNIST IDX files")
    f.add_argument("--dest", type=Path)
    f.add_argument("--url")
    return parser


def _dispatch(args) -> int:
    if args.command in ("train", "pipeline"):
        cfg = load_config(args.config, args.overrides)
        _setup_logging(cfg.run_name)
        _banner(f"{args.command}: {cfg.run_name}")
        if args.command == "train":
            if args.seeds < 1:
                raise ConfigInvalidError(f"--seeds must be >= 1, got {args.seeds}")
            if args.seeds > 1:
                cmd_train_seeds(cfg, args.seeds)
            else:
                cmd_train(cfg)
            return 0
        return cmd_pipeline(cfg)

    if args.command in ("eval", "analyze"):
        cfg = load_config(args.config, args.overrides) if args.config else load_config(None, args.overrides + ["strict_ranges=false"])
        _setup_logging(cfg.run_name)
        _banner(f"{args.command}: {args.checkpoint}")
        ds = _eval_dataset(cfg if args.config else None, args.data)
        mode = args.mode or cfg.eval.mode
        if args.command == "eval":
            out = args.out or args.checkpoint.parent / "eval.json"
            metrics = cmd_eval(
                args.checkpoint, ds, mode, args.repeats or cfg.eval.repeats, cfg.training.seed,
                cfg.eval.batch_size, cfg.eval.workers, out=out,
            )
            print(json.dumps(metrics, sort_keys=True))
            return 0
        cmd_analyze(args.checkpoint, ds, args.out or args.checkpoint.parent / "analysis", cfg, mode=mode)
        return 0

    _setup_logging(args.command)
    _banner(args.command)
    if args.command == "gen-data":
        cmd_gen_data(args.task, args.out, args.count, args.length, args.lag, args.seed, args.bins, args.vocab, args.dwell)
        return 0
    fetch_mnist(args.dest or data_dir() / "mnist", base_url=args.url)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except S6Error as exc:
        logging.getLogger("orchestrator").error("%s: %s", type(exc).__name__, exc)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:
        logging.getLogger("orchestrator").error("Unhandled error: %s", exc, exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
