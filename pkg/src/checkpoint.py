"""
Binary checkpoint file.

Layout (little-endian):
    b"DITC" | u32 version | u32 header_len | header JSON (sorted keys)
    u32 n_records | per record: u32 name_len, name, u32 rank, u32 dims..., f8 payload
    u32 K | u32 D | K x i8 shape ids | K*D x f8 latent codes

Reading then writing a file reproduces it byte for byte.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Dict

import numpy as np

from src.errors import CheckpointError, DataFileError

logger = logging.getLogger(__name__)

MAGIC = b"DITC"
VERSION = 1


@dataclass
class Checkpoint:
    header: Dict[str, Any]
    records: Dict[str, np.ndarray] = field(default_factory=dict)
    latent_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    latent_codes: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))


def _u32(f: BinaryIO, value: int):
    f.write(struct.pack("<I", value))


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _read_u32(f: BinaryIO) -> int:
    return struct.unpack("<I", _read_exact(f, 4))[0]


def save_checkpoint(path: str, ckpt: Checkpoint):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(ckpt.header, sort_keys=True).encode("utf-8")
    ids = np.asarray(ckpt.latent_ids, dtype="<i8").reshape(-1)
    codes = np.asarray(ckpt.latent_codes, dtype="<f8")
    if codes.ndim != 2 or len(codes) != len(ids):
        raise ValueError(f"latent table shape {codes.shape} does not match {len(ids)} ids")
    with open(path, "wb") as f:
        f.write(MAGIC)
        _u32(f, VERSION)
        _u32(f, len(header))
        f.write(header)
        _u32(f, len(ckpt.records))
        for name, arr in ckpt.records.items():
            arr = np.asarray(arr, dtype="<f8")
            encoded = name.encode("utf-8")
            _u32(f, len(encoded))
            f.write(encoded)
            _u32(f, arr.ndim)
            for d in arr.shape:
                _u32(f, d)
            f.write(np.ascontiguousarray(arr).tobytes())
        _u32(f, codes.shape[0])
        _u32(f, codes.shape[1])
        f.write(ids.tobytes())
        f.write(np.ascontiguousarray(codes).tobytes())
    logger.debug(f"Saved checkpoint with {len(ckpt.records)} records to {path}")


def load_checkpoint(path: str) -> Checkpoint:
    try:
        f = open(path, "rb")
    except FileNotFoundError as e:
        raise DataFileError(path, "checkpoint not found") from e
    with f:
        if _read_exact(f, 4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        version = _read_u32(f)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        try:
            header = json.loads(_read_exact(f, _read_u32(f)).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: corrupt header ({e})") from e

        records: Dict[str, np.ndarray] = {}
        for _ in range(_read_u32(f)):
            name = _read_exact(f, _read_u32(f)).decode("utf-8")
            shape = tuple(_read_u32(f) for _ in range(_read_u32(f)))
            count = int(np.prod(shape, dtype=np.int64))
            records[name] = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8").reshape(shape).astype(np.float64)

        k, d = _read_u32(f), _read_u32(f)
        ids = np.frombuffer(_read_exact(f, 8 * k), dtype="<i8").astype(np.int64)
        codes = np.frombuffer(_read_exact(f, 8 * k * d), dtype="<f8").reshape(k, d).astype(np.float64)
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after latent table")
    return Checkpoint(header, records, ids, codes)
