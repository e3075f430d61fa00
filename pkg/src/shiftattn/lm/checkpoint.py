"""Self-describing binary checkpoints.

Layout (little-endian)::

    b"CSAT"  uint32 version  uint32 config_len  config (UTF-8 JSON)
    uint32 tensor_count
    per tensor: uint16 name_len, name, uint8 dtype (0=f64, 1=f32),
                uint8 ndim, uint32 dims[ndim], raw values
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from ..patterns import Full, HeadPlan, LongMixed, PatternSpec, Sda, make_pattern
from .model import ModelConfig, ToyLM

MAGIC = b"CSAT"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


def pattern_to_dict(spec: PatternSpec) -> dict:
    out = {"name": spec.name}
    if isinstance(spec, Sda):
        out["theta"] = spec.theta
    elif not isinstance(spec, Full):
        out["w"] = spec.w
    if isinstance(spec, LongMixed) and spec.plans is not None:
        out["plans"] = [asdict(p) for p in spec.plans]
    return out


def pattern_from_dict(d: dict) -> PatternSpec:
    if d["name"] == "longmixed" and "plans" in d:
        return LongMixed(d["w"], tuple(HeadPlan(**p) for p in d["plans"]))
    return make_pattern(d["name"], w=d.get("w"), theta=d.get("theta"))


def config_to_dict(cfg: ModelConfig) -> dict:
    out = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    out["patterns"] = [pattern_to_dict(p) for p in cfg.patterns]
    return out


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["patterns"] = tuple(pattern_from_dict(p) for p in d["patterns"])
    return ModelConfig(**d)


def save_checkpoint(model: ToyLM, path: str | Path) -> None:
    cfg = json.dumps(config_to_dict(model.config), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(model.params))]
    for name, arr in model.params.items():
        code = 0 if arr.dtype == np.float64 else 1
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> ToyLM:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, cfg_len = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    cfg = config_from_dict(json.loads(buf[pos:pos + cfg_len]))
    pos += cfg_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        dtype = _DTYPES[code]
        size = int(np.prod(shape)) * dtype.itemsize
        params[name] = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)), offset=pos).reshape(shape).astype(dtype.newbyteorder("="))
        pos += size
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return ToyLM(cfg, params)
