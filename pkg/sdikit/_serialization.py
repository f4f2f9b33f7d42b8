# Binary checkpoint files, the JSON checkpoint manifest, and the per-(checkpoint, split) feature cache.
# All binary layouts are little-endian.

import json
import os
import struct
from typing import Dict, Iterator, List, Mapping, Tuple

import numpy as np

from sdikit import _constants
from sdikit._errors import FormatError
from sdikit._looped_model import Checkpoint, ModelConfig

_U32 = struct.Struct("<I")
_F64 = struct.Struct("<d")
_U64 = struct.Struct("<Q")
_FEATURE_HEADER = struct.Struct("<IIII")


class _Reader:
    """Cursor over a bytes buffer that raises FormatError on truncation."""

    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"'{self.path}' is truncated at byte {self.pos} (needed {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take(fmt.size))

# -----------------------------------------------------------------------------------------------
# ---- Checkpoints ----
# -----------------------------------------------------------------------------------------------

def checkpoint_to_bytes(checkpoint: Checkpoint) -> bytes:
    parts = [_constants.CHECKPOINT_MAGIC, _U32.pack(_constants.CHECKPOINT_VERSION), _U32.pack(len(checkpoint.params))]
    for name, value in checkpoint.params.items():
        value = np.ascontiguousarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(value.ndim))
        parts.extend(_U32.pack(int(s)) for s in value.shape)
        parts.append(value.tobytes(order="C"))
    parts.append(_F64.pack(float(checkpoint.eta)))
    parts.append(_U64.pack(int(checkpoint.step)))
    return b"".join(parts)


def checkpoint_from_bytes(data: bytes, path: str = "<bytes>") -> Checkpoint:
    reader = _Reader(data, path)
    if reader.take(4) != _constants.CHECKPOINT_MAGIC:
        raise FormatError(f"'{path}' is not a checkpoint file (bad magic)")
    (version,) = reader.unpack(_U32)
    if version != _constants.CHECKPOINT_VERSION:
        raise FormatError(f"'{path}' has checkpoint version {version}, expected {_constants.CHECKPOINT_VERSION}")
    (count,) = reader.unpack(_U32)

    params: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack(_U32)
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack(_U32)
        shape = tuple(reader.unpack(_U32)[0] for _ in range(rank))
        n_values = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(reader.take(8 * n_values), dtype="<f8").astype(np.float64)
        params[name] = values.reshape(shape)

    (eta,) = reader.unpack(_F64)
    (step,) = reader.unpack(_U64)
    if reader.pos != len(data):
        raise FormatError(f"'{path}' has {len(data) - reader.pos} trailing bytes")
    return Checkpoint(params, eta, step)


def save_checkpoint(path: str, checkpoint: Checkpoint) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_to_bytes(checkpoint))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read(), path)


def write_manifest(directory: str, checkpoints: List[Checkpoint], config: ModelConfig,
                   extra: Mapping = None) -> str:
    """
    Write every checkpoint as `ckpt_<step>.sdi` plus `manifest.json` listing them in training order.
    Returns:
        str: path of the manifest
    """
    os.makedirs(directory, exist_ok=True)
    entries = []
    for checkpoint in checkpoints:
        filename = f"ckpt_{checkpoint.step:08d}.sdi"
        save_checkpoint(os.path.join(directory, filename), checkpoint)
        entries.append({"file": filename, "step": int(checkpoint.step), "eta": float(checkpoint.eta),
                        "loss": None if np.isnan(checkpoint.loss) else float(checkpoint.loss)})

    manifest = {
        "schema_version": _constants.REPORT_SCHEMA_VERSION,
        "config": config.to_json(),
        "checkpoints": entries,
    }
    if extra:
        manifest.update(extra)

    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
    return path


def read_manifest(path: str) -> Tuple[ModelConfig, List[dict], dict]:
    """Model config, checkpoint entries (with absolute file paths) and the raw manifest."""
    with open(path) as f:
        manifest = json.load(f)
    try:
        config = ModelConfig(**manifest["config"])
        entries = list(manifest["checkpoints"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"'{path}' is not a checkpoint manifest ({exc})")

    base = os.path.dirname(os.path.abspath(path))
    for entry in entries:
        entry["path"] = os.path.join(base, entry["file"])
    steps = [e["step"] for e in entries]
    if steps != sorted(steps):
        raise FormatError(f"'{path}' lists checkpoints out of training order")
    return config, entries, manifest


def iter_checkpoints(path: str) -> Iterator[Checkpoint]:
    """Load the checkpoints of a manifest one at a time."""
    _, entries, _ = read_manifest(path)
    for entry in entries:
        checkpoint = load_checkpoint(entry["path"])
        if entry.get("loss") is not None:
            checkpoint.loss = float(entry["loss"])
        yield checkpoint

# -----------------------------------------------------------------------------------------------
# ---- Feature cache ----
# -----------------------------------------------------------------------------------------------

def write_feature_cache(path: str, steps: np.ndarray, m: int, n_tensors: int) -> None:
    """
    Store per-step sketched features of shape (n_examples, tau, n_tensors * m) as
    {magic "SDIF", m, tau, n_tensors, n_examples} followed by row-major f64 blocks.
    """
    steps = np.ascontiguousarray(steps, dtype="<f8")
    if steps.ndim != 3 or steps.shape[2] != n_tensors * m:
        raise ValueError(f"features must have shape (n, tau, {n_tensors * m}), got {steps.shape}")
    n_examples, tau, _ = steps.shape
    with open(path, "wb") as f:
        f.write(_constants.FEATURE_CACHE_MAGIC)
        f.write(_FEATURE_HEADER.pack(m, tau, n_tensors, n_examples))
        f.write(steps.tobytes(order="C"))


def read_feature_cache(path: str) -> Tuple[int, int, np.ndarray]:
    """Returns (m, n_tensors, steps) with steps of shape (n_examples, tau, n_tensors * m)."""
    with open(path, "rb") as f:
        data = f.read()
    reader = _Reader(data, path)
    if reader.take(4) != _constants.FEATURE_CACHE_MAGIC:
        raise FormatError(f"'{path}' is not a feature cache (bad magic)")
    m, tau, n_tensors, n_examples = reader.unpack(_FEATURE_HEADER)
    n_values = n_examples * tau * n_tensors * m
    values = np.frombuffer(reader.take(8 * n_values), dtype="<f8").astype(np.float64)
    if reader.pos != len(data):
        raise FormatError(f"'{path}' has {len(data) - reader.pos} trailing bytes")
    return m, n_tensors, values.reshape(n_examples, tau, n_tensors * m)
