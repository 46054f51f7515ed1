"""Trainer — train_step, evaluate and the epoch loop.

Training is parallel over the sequence: every step rebuilds the S6 kernels
from the current continuous parameters, runs the whole sequence through the
convolutional path in TRAIN_SAMPLE mode (or EVAL_EXPECTED, which trains the
probability-propagation network) and back-propagates with the exact kernel
adjoint plus the expectation surrogate for each sampler.

All randomness comes from one root seed: parameter init, shuffling and the
per-step sampler seeds are derived from it with SeedSequence.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import log_softmax
from sklearn.metrics import accuracy_score, f1_score

from s6snn.errors import NonFiniteError, NonFiniteLossError
from s6snn.layers import Mode
from s6snn.model import S6Network
from s6snn.optim import AdamW, clip_grad_norm
from s6snn.tape import IGNORE_INDEX, Tape, softmax_cross_entropy
from s6snn.tasks import SequenceDataset

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray

    @classmethod
    def from_dataset(cls, ds: SequenceDataset, indices=None) -> "Batch":
        if indices is None:
            indices = np.arange(len(ds))
        return cls(ds.inputs[indices], ds.labels[indices], ds.sample_ids[indices])


@dataclass
class FitResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_accuracy: float = float("nan")
    stopped_early: bool = False
    steps: int = 0


def derive_seed(*keys: int) -> int:
    """Stable 32-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def iter_batches(ds: SequenceDataset, batch_size: int, rng: np.random.Generator | None = None):
    order = np.arange(len(ds)) if rng is None else rng.permutation(len(ds))
    for start in range(0, len(order), batch_size):
        yield Batch.from_dataset(ds, order[start : start + batch_size])


def _flat_predictions(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = logits.argmax(axis=-1).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    keep = y != IGNORE_INDEX
    return y[keep], pred[keep]


def batch_loss(
    model: S6Network,
    batch: Batch,
    mode: Mode | str,
    seed: int,
    training: bool = False,
    tape: Tape | None = None,
):
    """Forward + cross-entropy. Returns (loss Variable, ForwardResult)."""
    tape = tape or Tape(record=False)
    try:
        result = model.forward(
            batch.inputs, mode=mode, seed=seed, sample_ids=batch.sample_ids, training=training, tape=tape
        )
    except NonFiniteError as exc:
        raise NonFiniteLossError(f"non-finite forward pass: {exc}", layer=exc.layer) from exc
    loss = softmax_cross_entropy(tape, result.logits, batch.labels)
    if not np.isfinite(loss.value):
        raise NonFiniteLossError(f"loss is {float(loss.value)}", layer="decoder")
    return loss, result


def train_step(
    model: S6Network,
    batch: Batch,
    optimizer: AdamW,
    seed: int,
    grad_clip: float = 0.0,
    mode: Mode | str = Mode.TRAIN_SAMPLE,
):
    """One optimizer update on ``batch``.

    The forward pass samples spikes (TRAIN_SAMPLE) unless ``mode`` is
    EVAL_EXPECTED, which trains the probability-propagation network whose
    gradient the sampler surrogate already follows.

    Returns:
        (loss, metrics) where metrics holds accuracy, grad_norm and lr.

    Raises:
        NonFiniteLossError: nothing is updated; ``layer`` names the culprit.
    """
    tape = Tape()
    loss, result = batch_loss(model, batch, mode, seed, training=True, tape=tape)
    try:
        tape.backward(loss)
    except NonFiniteError as exc:
        raise NonFiniteLossError(f"non-finite gradient: {exc}", layer=exc.layer) from exc

    grads = {}
    for name, leaf in result.leaves.items():
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        if not np.all(np.isfinite(g)):
            raise NonFiniteLossError(f"gradient of {name} is not finite", layer=name.rsplit(".", 1)[0])
        grads[name] = g
    grad_norm = clip_grad_norm(grads, grad_clip)
    lr = optimizer.step(model.params, grads)
    model.update_running_stats(result.batch_stats)

    y, pred = _flat_predictions(result.logits.value, batch.labels)
    metrics = {
        "loss": float(loss.value),
        "accuracy": float(accuracy_score(y, pred)) if y.size else 0.0,
        "grad_norm": grad_norm,
        "lr": lr,
    }
    logger.debug("step %d loss %.4f acc %.3f", optimizer.state.step, metrics["loss"], metrics["accuracy"])
    return metrics["loss"], metrics


def _logits_for_seed(model: S6Network, ds: SequenceDataset, mode: Mode, seed: int, batch_size: int):
    chunks = []
    rates: dict[str, float] = {}
    for batch in iter_batches(ds, batch_size):
        result = model.forward(batch.inputs, mode=mode, seed=seed, sample_ids=batch.sample_ids)
        chunks.append(result.logits.value)
        weight = len(batch.labels) / len(ds)
        for name, rate in result.rates.items():
            rates[name] = rates.get(name, 0.0) + rate * weight
    return np.concatenate(chunks, axis=0), rates


def evaluate(
    model: S6Network,
    ds: SequenceDataset,
    mode: Mode | str = Mode.EVAL_SAMPLE,
    repeats: int = 8,
    seed: int = 0,
    batch_size: int = 64,
    workers: int = 1,
) -> dict:
    """Accuracy, loss, macro-F1 and per-layer spike rates on ``ds``.

    EVAL_SAMPLE averages logits over ``repeats`` sampler seeds (run on a thread
    pool, reduced in seed order); EVAL_EXPECTED is a single deterministic pass.
    """
    mode = Mode(mode)
    if len(ds) == 0:
        return {"accuracy": 0.0, "loss": 0.0, "macro_f1": 0.0, "count": 0, "mode": mode.value, "repeats": 0}
    runs = repeats if mode is Mode.EVAL_SAMPLE else 1
    seeds = [derive_seed(seed, r) for r in range(runs)]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        outputs = list(pool.map(lambda s: _logits_for_seed(model, ds, mode, s, batch_size), seeds))

    logits = outputs[0][0].copy()
    for extra, _ in outputs[1:]:
        logits += extra
    logits /= runs
    rates = {name: float(np.mean([o[1][name] for o in outputs])) for name in outputs[0][1]}

    labels = ds.labels
    logp = log_softmax(logits, axis=-1).reshape(-1, logits.shape[-1])
    y_all = labels.reshape(-1)
    keep = y_all != IGNORE_INDEX
    loss = float(-np.mean(logp[keep, y_all[keep]])) if keep.any() else 0.0
    y, pred = _flat_predictions(logits, labels)
    metrics = {
        "accuracy": float(accuracy_score(y, pred)) if y.size else 0.0,
        "loss": loss,
        "macro_f1": float(f1_score(y, pred, average="macro", zero_division=0)) if y.size else 0.0,
        "count": int(len(ds)),
        "mode": mode.value,
        "repeats": runs,
        "spike_rates": rates,
    }
    return metrics


def fit(
    model: S6Network,
    train_ds: SequenceDataset,
    val_ds: SequenceDataset | None,
    lr: float,
    epochs: int,
    batch_size: int,
    seed: int = 0,
    weight_decay: float = 0.0,
    lr_min: float = 0.0,
    grad_clip: float = 0.0,
    patience: int = 0,
    metrics_path: Path | None = None,
    on_epoch: Callable[[dict], None] | None = None,
    mode: Mode | str = Mode.TRAIN_SAMPLE,
    test_ds: SequenceDataset | None = None,
) -> FitResult:
    """Train for ``epochs`` epochs, optionally stopping early on validation accuracy.

    Each epoch appends one JSON line to ``metrics_path``; with ``test_ds`` the
    line also carries that epoch's test accuracy (EVAL_EXPECTED). With early
    stopping the best parameters seen on the validation set are restored at
    the end.
    """
    steps_per_epoch = max(1, -(-len(train_ds) // batch_size))
    optimizer = AdamW(
        model.params, lr=lr, weight_decay=weight_decay,
        total_steps=epochs * steps_per_epoch, lr_min=lr_min,
    )
    result = FitResult()
    best_state = None
    stale = 0
    if metrics_path is not None:
        metrics_path = Path(metrics_path)
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        metrics_path.write_text("", encoding="utf-8")

    for epoch in range(epochs):
        rng = np.random.default_rng(derive_seed(seed, epoch, 1))
        losses, accs = [], []
        for i, batch in enumerate(iter_batches(train_ds, batch_size, rng)):
            loss, m = train_step(model, batch, optimizer, derive_seed(seed, epoch, i, 2), grad_clip, mode)
            losses.append(loss)
            accs.append(m["accuracy"])
            result.steps += 1

        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else 0.0,
            "train_accuracy": float(np.mean(accs)) if accs else 0.0,
            "lr": optimizer.state.lr,
        }
        if val_ds is not None and len(val_ds):
            val = evaluate(model, val_ds, Mode.EVAL_EXPECTED, batch_size=batch_size)
            record["val_loss"] = val["loss"]
            record["val_accuracy"] = val["accuracy"]
        if test_ds is not None and len(test_ds):
            record["test_accuracy"] = evaluate(model, test_ds, Mode.EVAL_EXPECTED, batch_size=batch_size)["accuracy"]
        result.history.append(record)
        logger.info(
            "Epoch %d/%d train_loss %.4f train_acc %.3f val_acc %s",
            epoch + 1, epochs, record["train_loss"], record["train_accuracy"],
            f"{record['val_accuracy']:.3f}" if "val_accuracy" in record else "n/a",
        )
        if metrics_path is not None:
            with open(metrics_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        if on_epoch is not None:
            on_epoch(record)

        val_acc = record.get("val_accuracy")
        if val_acc is not None and not val_acc <= result.best_val_accuracy:
            result.best_val_accuracy = val_acc
            result.best_epoch = epoch
            stale = 0
            if patience > 0:
                best_state = ({k: v.copy() for k, v in model.params.items()}, dict(model.running))
        elif val_acc is not None:
            stale += 1
            if patience > 0 and stale >= patience:
                logger.warning("Early stop at epoch %d: no val improvement for %d epochs", epoch + 1, patience)
                result.stopped_early = True
                break

    if best_state is not None:
        model.params, model.running = best_state
    return result


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of f() w.r.t. the array ``x``, perturbed in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        up = f()
        x[idx] = orig - eps
        down = f()
        x[idx] = orig
        grad[idx] = (up - down) / (2.0 * eps)
    return grad
