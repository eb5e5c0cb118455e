"""Image export: binary PGM for 2-D arrays, raw float32 container for volumes."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import container


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path: str | Path, img: np.ndarray, comment: str | None = None) -> None:
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n")
        if comment:
            fh.write(b"# " + comment.replace("\n", " ").encode("utf-8") + b"\n")
        fh.write(f"{w} {h}\n255\n".encode("ascii"))
        fh.write(to_u8(img).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1)
    return data.reshape(h, w).astype(np.float32) / 255.0


def write_volume(path: str | Path, vol: np.ndarray, meta: dict | None = None) -> None:
    container.save(path, {"volume": vol.astype(np.float32)}, meta, kind="volume")


def read_volume(path: str | Path) -> np.ndarray:
    tensors, _, kind = container.load(path)
    if kind != "volume":
        raise container.ContainerError(f"{path}: expected a volume, found {kind!r}")
    return tensors["volume"]


def write_image(stem: str | Path, img: np.ndarray, meta: dict | None = None) -> Path:
    """Dispatch on rank; returns the written path (``.pgm`` or ``.vol``)."""
    stem = Path(stem)
    if img.ndim == 2:
        path = stem.with_suffix(".pgm")
        write_pgm(path, img, json.dumps(meta, sort_keys=True) if meta else None)
    else:
        path = stem.with_suffix(".vol")
        write_volume(path, img, meta)
    return path
