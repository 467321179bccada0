"""Dataset directory format: one binary file per sample plus a text manifest.

Sample file ``<id>.vol`` (all integers and floats little-endian):

    offset  size  field
    0       4     magic b"PVOL"
    4       8     version, ASCII, NUL padded ("1.0")
    12      4+4+4 dims Dz, Dy, Dx (uint32)
    24      8     voxel size mm (float64)
    32      1     label (uint8, 0 benign / 1 malignant)
    33      1     mask present (uint8, 0/1)
    34      1     vessel contact flag (uint8)
    35      1     reserved (0)
    36      8     diameter mm (float64)
    44      8     spiculation amplitude (float64)
    52      2     id length n (uint16)
    54      n     id, UTF-8
    54+n    4V    image, float32, C order (V = Dz*Dy*Dx)
    ...     V     mask, uint8, C order (only when mask present)

The file must end exactly after the last payload byte.

``manifest.tsv`` starts with a ``# pare-dataset <version>`` line and a
column header, then one row per sample: id, split, label, diameter_mm, mask.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .phantom import VolumeSample

MAGIC = b"PVOL"
VERSION = "1.0"
SPLITS = ("train", "val", "test")
_FIXED = struct.Struct("<4s8s3Id4B2dH")
MANIFEST = "manifest.tsv"


class DatasetFormatError(ValueError):
    """A dataset file is corrupt, truncated or of an unknown version."""


def _encode(sample: VolumeSample) -> bytes:
    image = np.ascontiguousarray(sample.image, dtype="<f4")
    if image.ndim != 3:
        raise ValueError(f"sample {sample.id}: image must be 3-d, got shape {image.shape}")
    ident = sample.id.encode("utf-8")
    feats = sample.features or {}
    head = _FIXED.pack(
        MAGIC, VERSION.encode("ascii").ljust(8, b"\0"), *image.shape, float(sample.voxel_mm),
        int(sample.label), int(sample.mask is not None), int(feats.get("vessel_contact", 0)), 0,
        float(sample.diameter_mm), float(feats.get("spiculation", 0.0)), len(ident),
    )
    parts = [head, ident, image.tobytes()]
    if sample.mask is not None:
        mask = np.ascontiguousarray(sample.mask, dtype=np.uint8)
        if mask.shape != image.shape:
            raise ValueError(f"sample {sample.id}: mask shape {mask.shape} vs image {image.shape}")
        parts.append(mask.tobytes())
    return b"".join(parts)


def write_sample(sample: VolumeSample, path) -> None:
    Path(path).write_bytes(_encode(sample))


def read_sample(path) -> VolumeSample:
    path = Path(path)
    buf = path.read_bytes()

    def need(offset: int, size: int, what: str):
        if offset + size > len(buf):
            raise DatasetFormatError(
                f"{path}: truncated at offset {len(buf)} while reading {what} "
                f"(needs bytes {offset}..{offset + size})"
            )

    need(0, _FIXED.size, "header")
    (magic, version, dz, dy, dx, voxel, label, has_mask, contact, _reserved,
     diameter, spic, id_len) = _FIXED.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r} at offset 0")
    ver = version.rstrip(b"\0").decode("ascii", errors="replace")
    if ver != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {ver!r} at offset 4 (expected {VERSION!r})")
    if label not in (0, 1) or has_mask not in (0, 1) or contact not in (0, 1):
        raise DatasetFormatError(f"{path}: corrupt header flags at offset 32")
    if min(dz, dy, dx) < 1:
        raise DatasetFormatError(f"{path}: corrupt dims {(dz, dy, dx)} at offset 12")
    off = _FIXED.size
    need(off, id_len, "id")
    ident = buf[off:off + id_len].decode("utf-8")
    off += id_len
    nvox = dz * dy * dx
    need(off, 4 * nvox, "image")
    image = np.frombuffer(buf, dtype="<f4", count=nvox, offset=off).reshape(dz, dy, dx).astype(np.float32)
    off += 4 * nvox
    mask = None
    if has_mask:
        need(off, nvox, "mask")
        mask = np.frombuffer(buf, dtype=np.uint8, count=nvox, offset=off).reshape(dz, dy, dx).copy()
        if mask.max() > 4:
            raise DatasetFormatError(f"{path}: mask value {int(mask.max())} outside 0..4 at offset {off}")
        off += nvox
    if off != len(buf):
        raise DatasetFormatError(f"{path}: {len(buf) - off} trailing bytes at offset {off}")
    return VolumeSample(
        id=ident, image=image, mask=mask, label=int(label), diameter_mm=float(diameter),
        voxel_mm=float(voxel), features={"vessel_contact": int(contact), "spiculation": float(spic)},
    )


def assign_splits(n: int, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> list[str]:
    """Random split names with counts floor(f*n), remainder handed out by largest fraction part."""
    f = np.asarray(fractions, dtype=np.float64)
    if f.shape != (3,) or np.any(f < 0) or not np.isclose(f.sum(), 1.0):
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    raw = f * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    names = np.repeat(np.array(SPLITS), counts)
    return list(np.random.default_rng([seed, 0x5B17]).permutation(names))


def write_dataset(samples, directory, splits: list[str] | None = None) -> Path:
    """Write every sample and the manifest. ``splits`` defaults to all "train"."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    splits = ["train"] * len(samples) if splits is None else list(splits)
    if len(splits) != len(samples):
        raise ValueError(f"{len(splits)} split names for {len(samples)} samples")
    seen = set()
    rows = [f"# pare-dataset {VERSION}", "id\tsplit\tlabel\tdiameter_mm\tmask"]
    for s, split in zip(samples, splits):
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        if s.id in seen:
            raise ValueError(f"duplicate sample id {s.id!r}")
        seen.add(s.id)
        write_sample(s, directory / f"{s.id}.vol")
        rows.append(f"{s.id}\t{split}\t{s.label}\t{s.diameter_mm!r}\t{int(s.mask is not None)}")
    (directory / MANIFEST).write_text("\n".join(rows) + "\n")
    return directory


def read_manifest(directory) -> list[tuple[str, str]]:
    """[(id, split)] in file order."""
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"{path}: no manifest")
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("# pare-dataset "):
        raise DatasetFormatError(f"{path}: missing '# pare-dataset' header line")
    ver = lines[0].split(maxsplit=2)[2].strip()
    if ver != VERSION:
        raise DatasetFormatError(f"{path}: unsupported manifest version {ver!r} (expected {VERSION!r})")
    out = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 5 or cols[1] not in SPLITS:
            raise DatasetFormatError(f"{path}: malformed row at line {lineno}: {line!r}")
        out.append((cols[0], cols[1]))
    return out


def read_dataset(directory, split: str | None = None) -> list[VolumeSample]:
    """Samples in manifest order, optionally restricted to one split."""
    directory = Path(directory)
    return [read_sample(directory / f"{i}.vol") for i, s in read_manifest(directory) if split in (None, s)]
