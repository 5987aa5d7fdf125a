"""On-disk formats: tensor files, checkpoints, images, CSV/JSON-lines.

Tensor file layout ("CFT1"): 4 magic bytes, u32 little-endian rank,
rank x u32 little-endian dims, float64 little-endian payload in C order.

Checkpoint layout ("CFCK"): 4 magic bytes, u32 version, u32 byte length of
a UTF-8 key=value hyperparameter block, that block, u32 tensor count, then
per tensor a u16 name length, the name bytes, and the tensor in CFT1
format; trailing u64 iteration and the RNG state bytes (everything to EOF).
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

TENSOR_MAGIC = b"CFT1"
CHECKPOINT_MAGIC = b"CFCK"
CHECKPOINT_VERSION = 1
_MAX_RANK = 32


class FormatError(ValueError):
    """A file does not conform to the declared layout."""


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def _pack_tensor(arr: np.ndarray) -> bytes:
    # np.ascontiguousarray would promote 0-d to 1-d and lose the rank
    arr = np.asarray(arr, dtype="<f8", order="C")
    head = TENSOR_MAGIC + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + arr.tobytes()


def _unpack_tensor(f) -> np.ndarray:
    magic = _read_exact(f, 4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(f, 4))
    if rank > _MAX_RANK:
        raise FormatError(f"implausible tensor rank {rank}")
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank)) if rank else ()
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    data = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8")
    return data.reshape(dims).astype(np.float64)


def write_tensor(path: Union[str, Path], arr: np.ndarray) -> None:
    Path(path).write_bytes(_pack_tensor(np.asarray(arr)))


def read_tensor(path: Union[str, Path]) -> np.ndarray:
    with open(path, "rb") as f:
        arr = _unpack_tensor(f)
        if f.read(1):
            raise FormatError("trailing bytes after tensor payload")
    return arr


@dataclass
class Checkpoint:
    hyper: dict[str, str]
    tensors: dict[str, np.ndarray]
    iteration: int
    rng_state: bytes


def write_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> None:
    lines = []
    for key, value in ckpt.hyper.items():
        if "=" not in key and "\n" not in key and "\n" not in str(value):
            lines.append(f"{key}={value}")
        else:
            raise ValueError(f"hyperparameter {key!r} not representable as key=value line")
    block = "\n".join(lines).encode("utf-8")
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack("<I", len(block))
    out += block
    out += struct.pack("<I", len(ckpt.tensors))
    for name, arr in ckpt.tensors.items():
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name!r}")
        out += struct.pack("<H", len(nb))
        out += nb
        out += _pack_tensor(np.asarray(arr))
    out += struct.pack("<Q", ckpt.iteration)
    out += ckpt.rng_state
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"checkpoint version {version} unsupported "
                              f"(expected {CHECKPOINT_VERSION})")
        (blen,) = struct.unpack("<I", _read_exact(f, 4))
        block = _read_exact(f, blen).decode("utf-8")
        hyper: dict[str, str] = {}
        for line in block.splitlines():
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"malformed hyperparameter line {line!r}")
            key, value = line.split("=", 1)
            hyper[key] = value
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, nlen).decode("utf-8")
            tensors[name] = _unpack_tensor(f)
        (iteration,) = struct.unpack("<Q", _read_exact(f, 8))
        rng_state = f.read()
    return Checkpoint(hyper, tensors, iteration, rng_state)


def write_pgm(path: Union[str, Path], img: np.ndarray) -> None:
    """8-bit binary PGM; input is clipped to [0, 255] and rounded."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM wants a 2-D array, got shape {img.shape}")
    data = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def write_ppm(path: Union[str, Path], img: np.ndarray) -> None:
    """8-bit binary PPM; input is (h, w, 3), clipped and rounded."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM wants an (h, w, 3) array, got shape {img.shape}")
    data = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def write_csv(path: Union[str, Path], header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path: Union[str, Path]) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        rows = list(reader)
    if not rows:
        raise FormatError("empty CSV file")
    return rows[0], rows[1:]


def write_jsonl(path: Union[str, Path], records) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path: Union[str, Path]) -> list[dict]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
