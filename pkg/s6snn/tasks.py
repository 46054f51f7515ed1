"""Tasks — sequence datasets: MNIST IDX ingestion, pixel permutation and synthetic long-range tasks.

Every dataset is a SequenceDataset with inputs (count, L, F) and labels that
are either one class per sequence (count,) or one per step (count, L) with
IGNORE_INDEX marking steps that carry no target.

Generation rules:
    copy   tokens 1..vocab-1 drawn uniformly fill steps [0, L-lag), each held
           for ``dwell`` consecutive steps, token 0 (blank) after. Input
           x[t] = token[t] / (vocab-1). Target at step t >= lag is
           token[t-lag]; earlier steps are ignored.
    adding channel 0 holds U[0, 1) values, channel 1 marks one step in each
           half of the sequence. Target = sum of the two marked values,
           binned: min(floor(sum / 2 · bins), bins - 1).
"""

import gzip
import logging
import math
import os
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import requests
from sklearn.model_selection import train_test_split

from s6snn.checkpoint import read_container, write_container
from s6snn.errors import (
    BadMagicError,
    CountMismatchError,
    DataMissingError,
    InvalidLabelError,
    InvalidLengthError,
    ShapeIncompatibleError,
    TruncatedFileError,
)
from s6snn.tape import IGNORE_INDEX

logger = logging.getLogger(__name__)

MIN_LENGTH = 8
MNIST_IMAGE_MAGIC = 2051
MNIST_LABEL_MAGIC = 2049
MAX_IMAGE_PIXELS = 1 << 24
MNIST_FILES = (
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
)
DEFAULT_MNIST_URL = "https://storage.googleapis.com/cvdf-datasets/mnist/"


@dataclass(frozen=True)
class SequenceDataset:
    inputs: np.ndarray
    labels: np.ndarray
    name: str
    num_classes: int
    permutation: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.inputs.ndim != 3:
            raise ShapeIncompatibleError(f"inputs must be (count, L, F), got {self.inputs.shape}")
        if self.labels.shape[0] != self.inputs.shape[0]:
            raise CountMismatchError(f"{self.labels.shape[0]} labels for {self.inputs.shape[0]} sequences")
        if self.labels.ndim == 2 and self.labels.shape[1] != self.inputs.shape[1]:
            raise ShapeIncompatibleError(f"per-step labels {self.labels.shape} do not match inputs {self.inputs.shape}")
        valid = self.labels[self.labels != IGNORE_INDEX]
        if valid.size and (valid.min() < 0 or valid.max() >= self.num_classes):
            raise ShapeIncompatibleError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def length(self) -> int:
        return self.inputs.shape[1]

    @property
    def features(self) -> int:
        return self.inputs.shape[2]

    @property
    def per_step(self) -> bool:
        return self.labels.ndim == 2

    @property
    def sample_ids(self) -> np.ndarray:
        return np.asarray(self.metadata.get("sample_ids", np.arange(len(self))))

    def subset(self, indices) -> "SequenceDataset":
        indices = np.asarray(indices, dtype=np.int64)
        meta = {**self.metadata, "sample_ids": self.sample_ids[indices]}
        return replace(self, inputs=self.inputs[indices], labels=self.labels[indices], metadata=meta)


# --- synthetic tasks ---


def _check_length(L: int, lag: int | None = None) -> None:
    if L < MIN_LENGTH:
        raise InvalidLengthError(f"sequence length must be >= {MIN_LENGTH}, got {L}")
    if lag is not None and not 0 < lag < L:
        raise InvalidLengthError(f"lag must satisfy 0 < lag < L, got lag={lag}, L={L}")


def gen_copy_task(count: int, L: int, lag: int, seed: int, vocab: int = 8, dwell: int = 1) -> SequenceDataset:
    _check_length(L, lag)
    if vocab < 3:
        raise InvalidLengthError(f"copy task needs vocab >= 3, got {vocab}")
    if dwell < 1:
        raise InvalidLengthError(f"dwell must be >= 1, got {dwell}")
    rng = np.random.default_rng(seed)
    span = L - lag
    segments = rng.integers(1, vocab, size=(count, -(-span // dwell)))
    tokens = np.zeros((count, L), dtype=np.int64)
    tokens[:, :span] = np.repeat(segments, dwell, axis=1)[:, :span]
    labels = np.full((count, L), IGNORE_INDEX, dtype=np.int64)
    labels[:, lag:] = tokens[:, : L - lag]
    inputs = (tokens / (vocab - 1)).astype(np.float64)[..., None]
    return SequenceDataset(
        inputs=inputs,
        labels=labels,
        name="copy",
        num_classes=vocab,
        metadata={"seed": seed, "lag": lag, "vocab": vocab, "dwell": dwell},
    )


def gen_adding_task(count: int, L: int, seed: int, bins: int = 10) -> SequenceDataset:
    _check_length(L)
    rng = np.random.default_rng(seed)
    values = rng.random((count, L))
    markers = np.zeros((count, L))
    half = L // 2
    first = rng.integers(0, half, size=count)
    second = rng.integers(half, L, size=count)
    rows = np.arange(count)
    markers[rows, first] = 1.0
    markers[rows, second] = 1.0
    total = values[rows, first] + values[rows, second]
    labels = np.minimum((total / 2.0 * bins).astype(np.int64), bins - 1)
    return SequenceDataset(
        inputs=np.stack([values, markers], axis=-1),
        labels=labels,
        name="adding",
        num_classes=bins,
        metadata={"seed": seed, "bins": bins},
    )


# --- MNIST ---


def _read_bytes(path: Path) -> bytes:
    """File contents, gunzipped when the file carries the gzip magic."""
    path = Path(path)
    if not path.exists():
        raise DataMissingError(f"data file not found: {path}")
    raw = path.read_bytes()
    if raw[:2] != b"\x1f\x8b":
        return raw
    try:
        return gzip.decompress(raw)
    except (EOFError, zlib.error) as exc:
        raise TruncatedFileError(f"{path}: gzip stream is truncated or corrupt ({exc})") from exc
    except OSError as exc:
        raise BadMagicError(f"{path}: not a valid gzip file ({exc})") from exc


def _read_idx(path: Path, magic: int, dims: int) -> tuple[tuple[int, ...], bytes]:
    data = _read_bytes(path)
    if len(data) < 4 + 4 * dims:
        raise TruncatedFileError(f"{path}: header truncated ({len(data)} bytes)")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic {found:#010x}, expected {magic:#010x}")
    shape = struct.unpack(">" + "I" * dims, data[4 : 4 + 4 * dims])
    size = math.prod(shape)
    body = data[4 + 4 * dims :]
    if len(body) < size:
        raise TruncatedFileError(f"{path}: expected {size} payload bytes, found {len(body)}")
    return shape, body[:size]


def load_mnist_idx(images_path: Path, labels_path: Path) -> SequenceDataset:
    """Load an IDX image/label pair as 784-step sequences with pixels in [0, 1]."""
    (n_img, rows, cols), pixels = _read_idx(images_path, MNIST_IMAGE_MAGIC, 3)
    (n_lab,), raw_labels = _read_idx(labels_path, MNIST_LABEL_MAGIC, 1)
    if rows * cols > MAX_IMAGE_PIXELS:
        raise InvalidLengthError(f"{images_path}: {rows}x{cols} images exceed {MAX_IMAGE_PIXELS} pixels")
    if n_img != n_lab:
        raise CountMismatchError(f"{images_path} has {n_img} images but {labels_path} has {n_lab} labels")
    images = np.frombuffer(pixels, dtype=np.uint8).reshape(n_img, rows * cols, 1)
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise InvalidLabelError(f"{labels_path}: digit label {labels.max()} outside 0..9")
    logger.info("Loaded %d MNIST images (%dx%d) from %s", n_img, rows, cols, images_path)
    return SequenceDataset(
        inputs=images.astype(np.float64) / 255.0,
        labels=labels,
        name="mnist",
        num_classes=10,
    )


def fetch_mnist(dest_dir: Path, base_url: str | None = None, timeout: float = 60.0) -> list[Path]:
    """Download the four MNIST IDX files into dest_dir, skipping ones already present."""
    base_url = base_url or os.getenv("S6_MNIST_URL", DEFAULT_MNIST_URL)
    dest_dir = Path(dest_dir)
    dest_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for fname in MNIST_FILES:
        target = dest_dir / fname
        paths.append(target)
        if target.exists():
            logger.info("Already present: %s", target)
            continue
        url = base_url.rstrip("/") + "/" + fname
        logger.info("Downloading %s", url)
        resp = requests.get(url, timeout=timeout)
        resp.raise_for_status()
        target.write_bytes(resp.content)
    return paths


# --- transforms ---


def permute(ds: SequenceDataset, seed: int | None) -> SequenceDataset:
    """Apply one fixed permutation of the time axis to every sequence.

    ``seed=None`` is the identity convention: data is returned unchanged.
    """
    if seed is None:
        return ds
    perm = np.random.default_rng(seed).permutation(ds.length)
    labels = ds.labels[:, perm] if ds.per_step else ds.labels
    meta = {**ds.metadata, "permutation_seed": seed}
    return replace(ds, inputs=ds.inputs[:, perm], labels=labels, permutation=perm, metadata=meta)


def inverse_permute(ds: SequenceDataset) -> SequenceDataset:
    if ds.permutation is None:
        return ds
    inv = np.argsort(ds.permutation)
    labels = ds.labels[:, inv] if ds.per_step else ds.labels
    meta = {k: v for k, v in ds.metadata.items() if k != "permutation_seed"}
    return replace(ds, inputs=ds.inputs[:, inv], labels=labels, permutation=None, metadata=meta)


def split_dataset(
    ds: SequenceDataset,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[SequenceDataset, SequenceDataset, SequenceDataset]:
    """Disjoint, seed-stable train/val/test split of the sequence indices."""
    train_f, val_f, test_f = fractions
    if min(fractions) < 0 or abs(train_f + val_f + test_f - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    idx = np.arange(len(ds))
    if len(ds) < 3:
        return ds.subset(idx), ds.subset(idx[:0]), ds.subset(idx[:0])
    rest_f = val_f + test_f
    if rest_f == 0:
        return ds.subset(idx), ds.subset(idx[:0]), ds.subset(idx[:0])
    train_idx, rest_idx = train_test_split(idx, test_size=rest_f, random_state=seed, shuffle=True)
    if test_f == 0:
        val_idx, test_idx = rest_idx, rest_idx[:0]
    elif val_f == 0:
        val_idx, test_idx = rest_idx[:0], rest_idx
    else:
        val_idx, test_idx = train_test_split(
            rest_idx, test_size=test_f / rest_f, random_state=seed, shuffle=True
        )
    return ds.subset(np.sort(train_idx)), ds.subset(np.sort(val_idx)), ds.subset(np.sort(test_idx))


# --- container IO ---


def save_dataset(ds: SequenceDataset, path: Path) -> Path:
    tensors = {"inputs": ds.inputs, "labels": ds.labels}
    if ds.permutation is not None:
        tensors["permutation"] = ds.permutation
    meta = {k: v for k, v in ds.metadata.items() if k != "sample_ids"}
    return write_container(path, tensors, kind="dataset", name=ds.name, num_classes=ds.num_classes, metadata=meta)


def load_dataset(path: Path) -> SequenceDataset:
    path = Path(path)
    if not path.exists():
        raise DataMissingError(f"dataset file not found: {path}")
    header, tensors = read_container(path)
    if header.get("kind") != "dataset":
        raise ShapeIncompatibleError(f"{path} is a {header.get('kind')!r} container, not a dataset")
    perm = tensors.get("permutation")
    return SequenceDataset(
        inputs=tensors["inputs"].astype(np.float64),
        labels=np.rint(tensors["labels"]).astype(np.int64),
        name=header["name"],
        num_classes=int(header["num_classes"]),
        permutation=None if perm is None else np.rint(perm).astype(np.int64),
        metadata=header.get("metadata", {}),
    )
