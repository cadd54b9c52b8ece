"""Versioned little-endian parameter checkpoints with a JSON sidecar.

Binary layout::

    4s magic "DMCK" | u32 version | u32 meta length | meta (utf-8 key=value config)
    u32 array count, then per array:
        u16 name length | name | u8 ndim | ndim x u32 shape | f64 data
    u32 CRC-32 of everything before it
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config, parse_kv
from .model import MILModel, SurvivalHead

__all__ = [
    "CheckpointError",
    "CheckpointMagicError",
    "CheckpointTruncatedError",
    "CheckpointVersionError",
    "CheckpointChecksumError",
    "encode_arrays",
    "decode_arrays",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"DMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


def encode_arrays(arrays: dict[str, np.ndarray], meta: str = "") -> bytes:
    meta_b = meta.encode("utf-8")
    parts = [struct.pack("<4sII", MAGIC, VERSION, len(meta_b)), meta_b, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack(f"<H{len(nb)}sB{arr.ndim}I", len(nb), nb, arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"truncated: needed {self.pos + n} bytes, file has {len(self.buf)}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_arrays(buf: bytes) -> tuple[dict[str, np.ndarray], str]:
    r = _Reader(buf)
    magic, version, meta_len = r.unpack("<4sII")
    if magic != MAGIC:
        raise CheckpointMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointVersionError(f"version mismatch: file has {version}, reader supports {VERSION}")
    meta = r.take(meta_len).decode("utf-8")
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(buf):
        raise CheckpointError(f"trailing data: expected {r.pos} bytes, got {len(buf)}")
    if zlib.crc32(buf[:body_end]) != crc:
        raise CheckpointChecksumError("checksum mismatch: checkpoint is corrupted")
    return arrays, meta


def _meta(model: MILModel, run: RunConfig | None) -> str:
    run = run if run is not None else RunConfig(model=model.cfg)
    text = dump_config(run)
    if model.survival_head is not None:
        text += "# survival_boundaries=" + ",".join(repr(float(b)) for b in model.survival_head.boundaries) + "\n"
    return text


def save_checkpoint(path: str | Path, model: MILModel, run: RunConfig | None = None) -> Path:
    """Write ``path`` and a human-readable ``path.json`` sidecar; returns the sidecar path."""
    p = Path(path)
    meta = _meta(model, run)
    p.write_bytes(encode_arrays(model.state(), meta))
    sidecar = p.with_name(p.name + ".json")
    info = {
        "format": "DMCK",
        "version": VERSION,
        "n_parameters": model.n_parameters(),
        "arrays": {k: list(v.shape) for k, v in model.params.items()},
        "config": dict(line.split("=", 1) for line in meta.splitlines() if "=" in line and not line.startswith("#")),
        "survival_boundaries": None
        if model.survival_head is None
        else [float(b) for b in model.survival_head.boundaries],
    }
    sidecar.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return sidecar


def load_checkpoint(path: str | Path) -> tuple[MILModel, RunConfig]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    arrays, meta = decode_arrays(p.read_bytes())
    run = parse_kv(meta)
    head = None
    for line in meta.splitlines():
        if line.startswith("# survival_boundaries="):
            head = SurvivalHead([float(x) for x in line.split("=", 1)[1].split(",")])
    model = MILModel(run.model, seed=run.seed, survival_head=head)
    model.load_state(arrays)
    return model, run
