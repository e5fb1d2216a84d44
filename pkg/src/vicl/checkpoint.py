"""Named-tensor binary checkpoints.

Layout: magic "CNDSR1\\n"; u32 tensor count; per tensor u32 name length,
UTF-8 name, u32 rank, u32 dims, f32 data (all little-endian); u32 config
length + UTF-8 JSON config echo; u64 RNG seed; u32 epoch. Writes go to a
temp file renamed on success so a failed run never leaves a partial file.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .autodiff import Tensor

MAGIC = b"CNDSR1\n"


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    """Magic/version mismatch or a truncated/odd-sized file."""


class CheckpointNameError(CheckpointError):
    """The tensor inventory does not match what the loader expects."""


def save_checkpoint(path: str, tensors: dict, config: dict, seed: int, epoch: int) -> None:
    dir_name = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".ckpt.", dir=dir_name)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(tensors)))
            for name, t in tensors.items():
                arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
                raw_name = name.encode("utf-8")
                fh.write(struct.pack("<I", len(raw_name)))
                fh.write(raw_name)
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.tobytes())
            blob = json.dumps(config, sort_keys=True).encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<QI", seed, epoch))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def load_checkpoint(path: str):
    """Returns (tensors, config, seed, epoch); tensors are float32 arrays."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(
            f"{path} is not a version-1 checkpoint (bad magic {blob[:7]!r})")
    off = len(MAGIC)

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointFormatError(f"truncated checkpoint {path} while reading {what}")
        piece = blob[off:off + n]
        off += n
        return piece

    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * size, f"data of {name}"), dtype="<f4")
        tensors[name] = data.reshape(dims).astype(np.float32)
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    try:
        config = json.loads(take(cfg_len, "config blob").decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"corrupt config echo in {path}") from exc
    seed, epoch = struct.unpack("<QI", take(12, "seed/epoch"))
    return tensors, config, seed, epoch


def validate_names(tensors: dict, expected: set, path: str = "<checkpoint>") -> None:
    """Exact inventory check; names either side does not know are errors."""
    missing = expected - set(tensors)
    unknown = set(tensors) - expected
    if missing:
        raise CheckpointNameError(f"{path} missing tensor entries: {sorted(missing)}")
    if unknown:
        raise CheckpointNameError(f"{path} has unknown tensor entries: {sorted(unknown)}")
