"""Single-file tensor container used for checkpoints and datasets.

Layout::

    magic      8 bytes  b"FCAPSv1\\n"
    length     uint64 little-endian, byte length of the manifest
    manifest   UTF-8 JSON: {"kind", "meta", "tensors": [{name, dtype, shape, offset, nbytes}]}
    blobs      raw little-endian row-major arrays at absolute, 8-byte aligned offsets
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FCAPSv1\n"
ALIGN = 8
DTYPE_TAGS = {"f32": "<f4", "f64": "<f8", "i64": "<i8", "i32": "<i4", "u8": "|u1"}
_TAG_OF = {np.dtype(v).str: k for k, v in DTYPE_TAGS.items()}


class ContainerError(ValueError):
    pass


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _tag(arr: np.ndarray) -> str:
    key = arr.dtype.newbyteorder("<").str if arr.dtype.byteorder not in "|" else arr.dtype.str
    if key not in _TAG_OF:
        raise ContainerError(f"unsupported dtype {arr.dtype}")
    return _TAG_OF[key]


def _manifest_bytes(kind: str, meta: dict, table: list[dict]) -> bytes:
    return json.dumps({"kind": kind, "meta": meta, "tensors": table}, sort_keys=True).encode("utf-8")


def save(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None, kind: str = "tensors") -> None:
    meta = meta or {}
    arrays = [(name, np.ascontiguousarray(arr)) for name, arr in tensors.items()]
    table = [{"name": n, "dtype": _tag(a), "shape": list(a.shape), "offset": 0, "nbytes": int(a.nbytes)}
             for n, a in arrays]
    # offsets live inside the manifest, so iterate until its length stops changing
    header_len = -1
    while True:
        blob = _manifest_bytes(kind, meta, table)
        if len(blob) == header_len:
            break
        header_len = len(blob)
        pos = _align(len(MAGIC) + 8 + header_len)
        for entry in table:
            entry["offset"] = pos
            pos = _align(pos + entry["nbytes"])
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for entry, (_, arr) in zip(table, arrays):
            fh.write(b"\0" * (entry["offset"] - fh.tell()))
            fh.write(arr.astype(DTYPE_TAGS[entry["dtype"]], copy=False).tobytes(order="C"))


def read_manifest(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC) + 8)
        if len(head) < len(MAGIC) + 8 or head[: len(MAGIC)] != MAGIC:
            raise ContainerError(f"{path}: not a fastcaps container")
        (n,) = struct.unpack("<Q", head[len(MAGIC):])
        raw = fh.read(n)
    if len(raw) != n:
        raise ContainerError(f"{path}: truncated manifest")
    return json.loads(raw.decode("utf-8"))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict, str]:
    """Returns ``(tensors, meta, kind)``."""
    manifest = read_manifest(path)
    data = Path(path).read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start % ALIGN or start + nbytes > len(data):
            raise ContainerError(f"{path}: bad offset for {entry['name']}")
        arr = np.frombuffer(data, dtype=DTYPE_TAGS[entry["dtype"]], count=nbytes // np.dtype(
            DTYPE_TAGS[entry["dtype"]]).itemsize, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(arr.dtype.newbyteorder("="))
    return tensors, manifest["meta"], manifest["kind"]
