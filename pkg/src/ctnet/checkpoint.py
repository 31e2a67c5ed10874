"""Binary checkpoint format.

Little-endian layout::

    b"CTNT" | u32 version | u32 n | n bytes UTF-8 JSON header
    record*  where record = u32 name_len | name | u32 rank | u32 dims[rank] | f32 payload
    u32 CRC32 of every preceding byte

The JSON header holds the model config, optional optimizer bookkeeping and
provenance. Parameter records use the canonical layer names; Adam moments
are stored as extra records prefixed ``adam.m:`` / ``adam.v:``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .config import ModelConfig, from_dict, to_dict
from .model import param_names

MAGIC = b"CTNT"
VERSION = 1
MOMENT_PREFIXES = ("adam.m:", "adam.v:")


class CheckpointError(ValueError):
    pass


class CheckpointMismatch(CheckpointError):
    def __init__(self, missing: list[str], extra: list[str]):
        self.missing, self.extra = missing, extra
        lines = ["parameter names do not match the model config"]
        lines += [f"  missing: {n}" for n in missing]
        lines += [f"  extra:   {n}" for n in extra]
        super().__init__("\n".join(lines))


@dataclass
class TrainState:
    step: int = 0  # Adam t
    epoch: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    state: TrainState | None = None
    provenance: dict[str, Any] = field(default_factory=dict)


def build_id(cfg: ModelConfig) -> str:
    from . import __version__
    digest = hashlib.sha1(json.dumps(to_dict(cfg), sort_keys=True).encode()).hexdigest()[:12]
    return f"ctnet-{__version__}-{digest}"


def _record(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode()
    a = np.ascontiguousarray(arr, dtype="<f4")
    return b"".join([struct.pack("<I", len(nb)), nb, struct.pack("<I", a.ndim),
                     struct.pack(f"<{a.ndim}I", *a.shape), a.tobytes()])


def dumps(ckpt: Checkpoint) -> bytes:
    header: dict[str, Any] = {"model": to_dict(ckpt.config), "provenance": ckpt.provenance}
    records = [_record(k, ckpt.params[k]) for k in sorted(ckpt.params)]
    if ckpt.state is not None:
        s = ckpt.state
        header["state"] = {"step": s.step, "epoch": s.epoch, "seed": s.seed}
        for k in sorted(s.m):
            records.append(_record("adam.m:" + k, s.m[k]))
            records.append(_record("adam.v:" + k, s.v[k]))
    hj = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<II", VERSION, len(hj)) + hj + b"".join(records)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    data = dumps(ckpt)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def loads(data: bytes, expected: ModelConfig | None = None) -> Checkpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointError("bad magic: not a CTNT checkpoint")
    if len(data) < 16:
        raise CheckpointError("CRC failure: file truncated")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError("CRC failure: checkpoint corrupt or truncated")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    off = 12
    header = json.loads(data[off:off + hlen].decode())
    off += hlen
    end = len(data) - 4
    arrays: dict[str, np.ndarray] = {}
    while off < end:
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        off += 4 * count
    if off != end:
        raise CheckpointError("malformed record stream")

    cfg = from_dict(ModelConfig, header["model"])
    params = {k: v for k, v in arrays.items() if not k.startswith(MOMENT_PREFIXES)}
    _check_names(set(param_names(cfg)), set(params))
    if expected is not None and expected != cfg:
        _check_names(set(param_names(expected)), set(params))
        a, b = to_dict(expected), to_dict(cfg)
        diff = sorted(k for k in a if a[k] != b[k])
        raise CheckpointError(f"model config differs from checkpoint in: {', '.join(diff)}")
    state = None
    if "state" in header:
        s = header["state"]
        state = TrainState(step=s["step"], epoch=s["epoch"], seed=s["seed"],
                           m={k[7:]: v for k, v in arrays.items() if k.startswith("adam.m:")},
                           v={k[7:]: v for k, v in arrays.items() if k.startswith("adam.v:")})
    return Checkpoint(cfg, params, state, header.get("provenance", {}))


def _check_names(want: set[str], have: set[str]) -> None:
    if want != have:
        raise CheckpointMismatch(sorted(want - have), sorted(have - want))


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read(), expected)
