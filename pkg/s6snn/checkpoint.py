"""Checkpoint — tensor container shared by checkpoints and generated datasets.

Layout (all little-endian):

    4 bytes   magic b"S6T1"
    4 bytes   uint32 header length H
    H bytes   UTF-8 JSON header
    ...       float32 blob, tensors concatenated in header order

The header lists every tensor as {name, shape, offset, count} (offsets in
elements) and carries the CRC-32 of the blob plus free-form fields (config,
seed, step, metadata).
"""

import json
import logging
import struct
import zlib
from pathlib import Path

import numpy as np

from s6snn import __version__
from s6snn.errors import ChecksumMismatchError, DataMissingError, ShapeIncompatibleError
from s6snn.model import NetworkConfig, S6Network

logger = logging.getLogger(__name__)

MAGIC = b"S6T1"
FORMAT_VERSION = 1
_BLOB_DTYPE = np.dtype("<f4")


def write_container(path: Path, tensors: dict[str, np.ndarray], **header_fields) -> Path:
    """Write ``tensors`` and the extra JSON ``header_fields`` to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype=_BLOB_DTYPE)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.reshape(-1).tobytes())
        offset += arr.size
    blob = b"".join(chunks)
    header = {
        "format": "s6-tensors",
        "version": FORMAT_VERSION,
        **header_fields,
        "tensors": entries,
        "crc32": zlib.crc32(blob),
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        f.write(blob)
    logger.debug("Wrote %d tensors (%d bytes) to %s", len(entries), len(blob), path)
    return path


def read_container(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read and verify a container; returns (header, tensors as float64/float32 arrays).

    Raises:
        ChecksumMismatchError: bad magic, truncated file or CRC mismatch.
    """
    path = Path(path)
    if not path.exists():
        raise DataMissingError(f"file not found: {path}")
    data = path.read_bytes()
    if len(data) < 8 or data[:4] != MAGIC:
        raise ChecksumMismatchError(f"{path}: not an S6 tensor container")
    (hlen,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + hlen:
        raise ChecksumMismatchError(f"{path}: header truncated")
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumMismatchError(f"{path}: header is not valid JSON: {exc}") from exc

    blob = data[8 + hlen :]
    total = sum(e["count"] for e in header.get("tensors", []))
    if len(blob) != total * _BLOB_DTYPE.itemsize:
        raise ChecksumMismatchError(
            f"{path}: blob has {len(blob)} bytes, header describes {total * _BLOB_DTYPE.itemsize}"
        )
    if zlib.crc32(blob) != header.get("crc32"):
        raise ChecksumMismatchError(f"{path}: CRC-32 mismatch, file is corrupted")

    flat = np.frombuffer(blob, dtype=_BLOB_DTYPE)
    tensors = {
        e["name"]: flat[e["offset"] : e["offset"] + e["count"]].reshape(e["shape"]).copy()
        for e in header["tensors"]
    }
    return header, tensors


def save_checkpoint(
    path: Path,
    model: S6Network,
    config: dict | None = None,
    seed: int = 0,
    step: int = 0,
    metadata: dict | None = None,
) -> Path:
    """Store model tensors with the network config needed to rebuild it."""
    return write_container(
        path,
        model.tensors(),
        kind="checkpoint",
        package_version=__version__,
        network=model.cfg.to_dict(),
        config=config or {},
        seed=seed,
        step=step,
        metadata=metadata or {},
    )


def load_checkpoint(path: Path) -> tuple[S6Network, dict]:
    """Rebuild the network stored at ``path``.

    Values round-trip through float32, so a reloaded model matches the saved
    one to float32 precision.

    Raises:
        ChecksumMismatchError: container is corrupted.
        ShapeIncompatibleError: tensors do not fit the stored network config.
    """
    header, tensors = read_container(path)
    if header.get("kind") != "checkpoint":
        raise ShapeIncompatibleError(f"{path} is a {header.get('kind')!r} container, not a checkpoint")
    try:
        cfg = NetworkConfig(**header["network"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ShapeIncompatibleError(f"{path}: stored network config is unusable: {exc}") from exc
    model = S6Network(cfg, seed=header.get("seed", 0))
    bad = model.load_tensors(tensors)
    if bad:
        raise ShapeIncompatibleError(f"{path}: tensors missing or mis-shaped for the stored config: {bad[:5]}")
    logger.info("Loaded checkpoint %s (step %d, %d tensors)", path, header.get("step", 0), len(tensors))
    return model, header
