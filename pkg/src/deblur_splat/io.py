"""
On-disk formats.

Checkpoint container (little-endian)::

    offset 0   4 bytes   magic b"DBSC"
    offset 4   uint32    container version (currently 1)
    offset 8   uint64    header length L in bytes
    offset 16  L bytes   UTF-8 JSON header
    ...        padding   zero bytes up to the next multiple of 8
    ...        blobs     raw arrays, each starting on an 8-byte boundary

The header carries ``arrays``: a list of ``{name, dtype, shape, offset,
nbytes}`` records (offsets relative to the start of the blob section),
plus free-form JSON ``meta``. Array dtypes are numpy strings such as
``"<f4"`` or ``"<f8"``. Poses are stored as ``(N, 7)`` ``"<f8"`` arrays of
``(qw, qx, qy, qz, tx, ty, tz)``.

Images are written as 8-bit PNG (for viewing) and ``.npy`` float arrays
(for metrics and training).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

MAGIC = b"DBSC"
CONTAINER_VERSION = 1


def write_container(path, arrays: dict, meta: dict | None = None) -> None:
    records = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        data = np.ascontiguousarray(arr).tobytes()
        records.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)}
        )
        pad = (-len(data)) % 8
        blobs.append(data + b"\0" * pad)
        offset += len(data) + pad
    header = json.dumps({"arrays": records, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    head_pad = (-(16 + len(header))) % 8
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", CONTAINER_VERSION, len(header)))
        fh.write(header)
        fh.write(b"\0" * head_pad)
        for b in blobs:
            fh.write(b)


def read_container(path):
    """Returns ``(arrays, meta)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint container")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != CONTAINER_VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen + ((-(16 + hlen)) % 8)
    arrays = {}
    for rec in header["arrays"]:
        start = base + rec["offset"]
        buf = raw[start : start + rec["nbytes"]]
        arrays[rec["name"]] = np.frombuffer(buf, dtype=np.dtype(rec["dtype"])).reshape(rec["shape"]).copy()
    return arrays, header["meta"]


def save_image(path_stem, image) -> tuple[str, str]:
    """Write ``<stem>.npy`` (float32) and ``<stem>.png`` (8-bit); returns both names."""
    stem = Path(path_stem)
    image = np.asarray(image)
    np.save(stem.with_suffix(".npy"), image.astype("<f4"))
    save_png(stem.with_suffix(".png"), image)
    return stem.with_suffix(".npy").name, stem.with_suffix(".png").name


def save_png(path, image) -> None:
    image = np.asarray(image, dtype=float)
    u8 = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(path, format="PNG")


def load_array(path):
    return np.load(path)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
