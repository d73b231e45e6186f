"""STMX1 tensor files and checkpoint directories.

STMX1 layout: 4-byte magic ``STMX``, one u8 dimension count, that many
little-endian u64 extents, then the row-major values as little-endian
float32. Values are stored in 32-bit on disk even though all computation is
64-bit; a round trip quantizes to float32.

A checkpoint is a directory holding ``manifest.txt`` (sorted ``key=value``
lines: arbitrary metadata plus one ``tensor.<name>=<relative file>`` entry
per stored tensor) and the referenced ``.stmx`` files.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"STMX"


def write_tensor(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        for extent in arr.shape:
            fh.write(struct.pack("<Q", extent))
        fh.write(arr.astype("<f4").tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Read an STMX1 file, upcast to float64."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (ndim,) = struct.unpack("<B", fh.read(1))
        dims = [struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim)]
        count = int(np.prod(dims)) if dims else 1
        raw = fh.read(4 * count)
        if len(raw) != 4 * count:
            raise CheckpointError(f"{path}: truncated payload")
        data = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return data.reshape(dims)


def _safe_name(name: str) -> str:
    return name.replace("/", "_")


def write_manifest(path, entries: dict[str, str]) -> None:
    lines = [f"{k}={entries[k]}" for k in sorted(entries)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, str]:
    entries: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CheckpointError(f"{path}: malformed manifest line {line!r}")
        key, value = line.split("=", 1)
        entries[key] = value
    return entries


def save_tensors(directory, tensors: dict[str, np.ndarray], metadata: dict[str, str]) -> None:
    """Write a manifest plus one STMX1 file per named tensor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = dict(metadata)
    for name, arr in tensors.items():
        rel = f"tensors/{_safe_name(name)}.stmx"
        write_tensor(directory / rel, arr)
        entries[f"tensor.{name}"] = rel
    write_manifest(directory / "manifest.txt", entries)


def load_tensors(directory) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    directory = Path(directory)
    manifest_path = directory / "manifest.txt"
    if not manifest_path.exists():
        raise CheckpointError(f"{directory}: no manifest.txt")
    entries = read_manifest(manifest_path)
    tensors: dict[str, np.ndarray] = {}
    metadata: dict[str, str] = {}
    for key, value in entries.items():
        if key.startswith("tensor."):
            tensors[key[len("tensor."):]] = read_tensor(directory / value)
        else:
            metadata[key] = value
    return tensors, metadata


def save_module(directory, module, metadata: dict[str, str]) -> None:
    tensors = {name: p.data for name, p in module.named_parameters()}
    save_tensors(directory, tensors, metadata)


def load_module(directory, module) -> dict[str, str]:
    """Load parameters into ``module``; names and dims must match exactly."""
    tensors, metadata = load_tensors(directory)
    expected = dict(module.named_parameters())
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointError(
            f"checkpoint mismatch: missing={missing[:5]} extra={extra[:5]}"
        )
    for name, param in expected.items():
        stored = tensors[name]
        if stored.shape != param.data.shape:
            raise CheckpointError(
                f"checkpoint tensor {name}: dims {stored.shape} != {param.data.shape}"
            )
        param.data[...] = stored
    return metadata
