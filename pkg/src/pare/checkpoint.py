"""Binary checkpoint container.

Layout (little-endian throughout):

    offset  size  field
    0       4     magic b"PCKP"
    4       8     version, ASCII, NUL padded ("1.0")
    12      8     iteration (uint64)
    20      4     config text length c (uint32)
    24      c     config, canonical JSON text, UTF-8
    24+c    4     record count r (uint32)
    ...           r records, each:
                    2    name length n (uint16)
                    n    name, UTF-8
                    1    ndim k (uint8)
                    4k   dims (uint32 each)
                    4V   data, float32, C order (V = product of dims)
    end-4   4     CRC-32 of every preceding byte (uint32)

Record names: ``param/<name>`` and ``velocity/<name>`` for the model and
optimizer, ``bank/benign``, ``bank/malignant``, ``bank/last_update_benign``
and ``bank/last_update_malignant`` for the prototype memory (update
iterations stored as float32, exact below 2**24), and ``warmup/benign`` /
``warmup/malignant`` for embeddings collected before the one-off clustering.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PCKP"
VERSION = "1.0"
_HEAD = struct.Struct("<4s8sQI")
_EXACT_LIMIT = 2**24


class CheckpointError(ValueError):
    """A checkpoint file is corrupt, truncated or of an unknown version."""


@dataclass
class CheckpointData:
    config_text: str
    iteration: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def encode(ckpt: CheckpointData) -> bytes:
    cfg = ckpt.config_text.encode("utf-8")
    parts = [_HEAD.pack(MAGIC, VERSION.encode("ascii").ljust(8, b"\0"), int(ckpt.iteration), len(cfg)), cfg]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        a = np.asarray(arr)
        if a.dtype.kind in "iu" and a.size and np.abs(a).max() >= _EXACT_LIMIT:
            raise ValueError(f"record {name!r}: integer values beyond float32 exact range")
        a = np.array(a, dtype="<f4", order="C")  # keeps 0-d shape, unlike ascontiguousarray
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save(ckpt: CheckpointData, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)
    return path


def _text(raw: bytes, path, offset: int) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError(f"{path}: invalid UTF-8 text at offset {offset}") from None


def load(path) -> CheckpointData:
    path = Path(path)
    buf = path.read_bytes()

    def need(offset, size, what):
        if offset + size > len(buf) - 4 or len(buf) < 4:
            raise CheckpointError(
                f"{path}: truncated at offset {max(0, len(buf) - 4)} while reading {what} "
                f"(needs bytes {offset}..{offset + size})"
            )

    need(0, _HEAD.size, "header")
    magic, version, iteration, clen = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r} at offset 0")
    ver = version.rstrip(b"\0").decode("ascii", errors="replace")
    if ver != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {ver!r} at offset 4 (expected {VERSION!r})")
    off = _HEAD.size
    need(off, clen, "config text")
    config_text = _text(buf[off:off + clen], path, off)
    off += clen
    need(off, 4, "record count")
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        need(off, 2, "record name length")
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(off, nlen + 1, "record name")
        name = _text(buf[off:off + nlen], path, off)
        off += nlen
        ndim = buf[off]
        off += 1
        need(off, 4 * ndim, f"dims of {name!r}")
        dims = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(dims, dtype=np.int64))
        need(off, 4 * size, f"data of {name!r}")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
        off += 4 * size
    if off != len(buf) - 4:
        raise CheckpointError(f"{path}: {len(buf) - 4 - off} unexpected bytes at offset {off}")
    (stored_crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != stored_crc:
        raise CheckpointError(f"{path}: checksum mismatch (CRC-32 at offset {len(buf) - 4}); file is corrupt")
    return CheckpointData(config_text, int(iteration), tensors)
