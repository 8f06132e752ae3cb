"""Single-file checkpoints: header, config text, RNG state, named tensors.

Layout (all little-endian):

    magic "DUNC" | u32 version | u64 step
    u32 len | config text (utf-8)
    u32 len | RNG state (canonical JSON)
    u32 tensor count, then per tensor in sorted-name order:
        u32 len | name utf-8 | u8 flags (bit 0: bias) | u32 ndim | u32 dims... | f8 data

Everything written is a deterministic function of the state, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

MAGIC = b"DUNC"
VERSION = 1


@dataclass
class CheckpointData:
    version: int
    step: int
    config_text: str
    rng_state: dict
    tensors: dict[str, np.ndarray]
    bias_flags: set[str]


def save_checkpoint(path, step: int, config_text: str, rng_state: dict,
                    tensors: dict[str, np.ndarray],
                    bias_flags: set[str] | None = None) -> None:
    bias_flags = bias_flags or set()
    rng_blob = json.dumps(rng_state, sort_keys=True).encode("utf-8")
    cfg_blob = config_text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, step))
        fh.write(struct.pack("<I", len(cfg_blob)))
        fh.write(cfg_blob)
        fh.write(struct.pack("<I", len(rng_blob)))
        fh.write(rng_blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            blob = name.encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<B", 1 if name in bias_flags else 0))
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (magic {blob[:4]!r})")
    version, step = struct.unpack_from("<IQ", blob, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    (cfg_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    config_text = blob[off:off + cfg_len].decode("utf-8")
    off += cfg_len
    (rng_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    rng_state = json.loads(blob[off:off + rng_len].decode("utf-8"))
    off += rng_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    bias_flags: set[str] = set()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (flags,) = struct.unpack_from("<B", blob, off)
        off += 1
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n_vals = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n_vals, offset=off)
        off += 8 * n_vals
        tensors[name] = arr.reshape(shape).copy()
        if flags & 1:
            bias_flags.add(name)
    return CheckpointData(version=version, step=step, config_text=config_text,
                          rng_state=rng_state, tensors=tensors,
                          bias_flags=bias_flags)
