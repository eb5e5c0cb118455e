"""Datasets: IDX files, the synthetic nodule generator, slicing and splits.

Randomness for dataset generation comes from :class:`Stream`, which draws raw
64-bit words from the PCG64 bit generator (PCG XSL RR 128/64, seeded through
``numpy.random.SeedSequence``) and converts them with fixed formulas, so a
given seed produces the same bytes regardless of numpy's distribution code.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SPLITS = {"train": 0, "val": 1, "test": 2}
UNASSIGNED = -1


class IdxError(ValueError):
    pass


class Stream:
    """Seeded PCG64 word stream with explicit float conversions."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._bits = np.random.PCG64(self.seed)

    def raw(self, n: int) -> np.ndarray:
        return np.asarray(self._bits.random_raw(n), dtype=np.uint64)

    def uniform(self, n: int | None = None, low: float = 0.0, high: float = 1.0):
        """Doubles in [low, high) from the top 53 bits of each word."""
        count = 1 if n is None else n
        u = (self.raw(count) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        u = low + (high - low) * u
        return float(u[0]) if n is None else u

    def normal(self, n: int) -> np.ndarray:
        """Box-Muller, one normal per pair of uniforms."""
        u1 = self.uniform(n)
        u2 = self.uniform(n)
        return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)

    def permutation(self, n: int) -> np.ndarray:
        # argsort of fresh words; ties are practically impossible with 64-bit keys
        return np.argsort(self.raw(n), kind="stable")

    def unit_vector(self) -> np.ndarray:
        v = self.normal(3)
        return v / np.linalg.norm(v)


@dataclass
class VolumeSample:
    voxels: np.ndarray
    label: int
    id: int


@dataclass
class DatasetManifest:
    images: np.ndarray  # (N, *shape) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    source: str
    seed: int | None = None
    params: dict = field(default_factory=dict)
    split: np.ndarray | None = None  # (N,) codes from SPLITS, -1 unassigned

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.split is None:
            self.split = np.full(len(self.labels), UNASSIGNED, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in count")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def sample(self, i: int) -> VolumeSample:
        return VolumeSample(self.images[i], int(self.labels[i]), i)

    def indices(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.split == SPLITS[name])

    def subset(self, name_or_idx) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(name_or_idx) if isinstance(name_or_idx, str) else np.asarray(name_or_idx)
        return self.images[idx], self.labels[idx]

    def class_balance(self) -> dict[str, float]:
        n = len(self)
        pos = int(np.sum(self.labels == 1))
        return {"n": n, "positives": pos, "negatives": n - pos, "positive_fraction": pos / n if n else 0.0}

    def split_sizes(self) -> dict[str, int]:
        return {k: int(np.sum(self.split == v)) for k, v in SPLITS.items()}

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        meta = {"source": self.source, "seed": self.seed, "params": self.params,
                "balance": self.class_balance(), "splits": self.split_sizes()}
        meta.update(extra_meta or {})
        container.save(path, {"images": self.images.astype(np.float32), "labels": self.labels,
                              "split": self.split}, meta, kind="dataset")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        tensors, meta, kind = container.load(path)
        if kind != "dataset":
            raise container.ContainerError(f"{path} holds a {kind}, not a dataset")
        return cls(tensors["images"], tensors["labels"], meta["source"], meta.get("seed"),
                   meta.get("params", {}), tensors["split"])


# ------------------------------------------------------------------------ IDX


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        fh.write(struct.pack(">" + "I" * images.ndim, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.size))
        fh.write(labels.tobytes())


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IdxError(f"{path}: truncated payload, expected {count} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> DatasetManifest:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) == 0:
        raise IdxError(f"{images_path}: no images")
    if len(images) != len(labels):
        raise IdxError(f"count mismatch: {len(images)} images, {len(labels)} labels")
    return DatasetManifest(images.astype(np.float32) / 255.0, labels.astype(np.int64), "idx",
                           params={"images": str(images_path), "labels": str(labels_path)})


# ------------------------------------------------------------------ synthetic


@dataclass(frozen=True)
class SynthParams:
    size: int = 32
    positive_fraction: float = 0.56
    noise_sigma: float = 0.05
    radius_range: tuple[float, float] = (3.0, 8.0)
    center_jitter: float = 2.0
    attached_vessel_prob: float = 0.3
    tube_radius_range: tuple[float, float] = (0.8, 2.0)
    tube_half_length: tuple[float, float] = (6.0, 14.0)
    plate_fraction: float = 0.3
    plate_half_thickness: tuple[float, float] = (0.6, 1.2)
    plate_radius_range: tuple[float, float] = (5.0, 9.0)
    edge_width: float = 0.7

    def to_dict(self) -> dict:
        # JSON-shaped, so a reloaded manifest compares equal
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def for_size(cls, size: int) -> "SynthParams":
        """Defaults with every length rescaled from a 32-voxel cube to ``size``."""
        if size < 8:
            raise ValueError("volume size must be >= 8")
        f = size / 32.0
        base = cls()

        def scale(r):
            return tuple(v * f for v in r)

        return cls(size=size, radius_range=scale(base.radius_range), center_jitter=base.center_jitter * f,
                   tube_radius_range=scale(base.tube_radius_range), tube_half_length=scale(base.tube_half_length),
                   plate_half_thickness=scale(base.plate_half_thickness),
                   plate_radius_range=scale(base.plate_radius_range), edge_width=base.edge_width * max(f, 0.5))


def _soft(x: np.ndarray, width: float) -> np.ndarray:
    # logistic edge; clip keeps exp finite
    return 1.0 / (1.0 + np.exp(np.clip(-x / width, -60.0, 60.0)))


def _profile(radius: float, dist: np.ndarray, width: float) -> np.ndarray:
    """Soft indicator of ``dist < radius`` scaled to 1 on the axis, so thin shapes keep their peak."""
    return _soft(radius - dist, width) / _soft(np.asarray(radius), width)


def _grid(size: int) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64)
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)  # (S, S, S, 3)


def _blob(rng: Stream, pts: np.ndarray, p: SynthParams, center: np.ndarray) -> tuple[np.ndarray, float]:
    radius = rng.uniform(None, *p.radius_range)
    axes = rng.uniform(3, 0.8, 1.2)
    peak = rng.uniform(None, 0.8, 1.0)
    d = np.linalg.norm((pts - center) / axes, axis=-1)
    # slightly brighter core with a soft rim
    core = 1.0 - 0.15 * np.clip(d / radius, 0.0, 1.0) ** 2
    return peak * core * _profile(radius, d, p.edge_width), radius


def _tube(rng: Stream, pts: np.ndarray, p: SynthParams, through: np.ndarray) -> np.ndarray:
    direction = rng.unit_vector()
    radius = rng.uniform(None, *p.tube_radius_range)
    half_length = rng.uniform(None, *p.tube_half_length)
    peak = rng.uniform(None, 0.8, 1.0)
    rel = pts - through
    along = rel @ direction
    dist = np.linalg.norm(rel - along[..., None] * direction, axis=-1)
    return peak * _profile(radius, dist, p.edge_width) * _profile(half_length, np.abs(along), p.edge_width)


def _plate(rng: Stream, pts: np.ndarray, p: SynthParams, center: np.ndarray) -> np.ndarray:
    normal = rng.unit_vector()
    half = rng.uniform(None, *p.plate_half_thickness)
    extent = rng.uniform(None, *p.plate_radius_range)
    peak = rng.uniform(None, 0.8, 1.0)
    rel = pts - center
    off = rel @ normal
    inplane = np.linalg.norm(rel - off[..., None] * normal, axis=-1)
    return peak * _profile(half, np.abs(off), p.edge_width) * _profile(extent, inplane, p.edge_width)


def _normalize(v: np.ndarray) -> np.ndarray:
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def synth_volume(rng: Stream, label: int, p: SynthParams, pts: np.ndarray) -> np.ndarray:
    mid = (p.size - 1) / 2.0
    if label == 1:
        center = mid + rng.uniform(3, -p.center_jitter, p.center_jitter)
        vol, radius = _blob(rng, pts, p, center)
        if rng.uniform() < p.attached_vessel_prob:
            touch = center + rng.unit_vector() * radius
            vol = np.maximum(vol, _tube(rng, pts, p, touch))
    else:
        center = mid + rng.uniform(3, -2.0 * p.center_jitter, 2.0 * p.center_jitter)
        if rng.uniform() < p.plate_fraction:
            vol = _plate(rng, pts, p, center)
        else:
            vol = _tube(rng, pts, p, center)
            if rng.uniform() < 0.5:
                vol = np.maximum(vol, _tube(rng, pts, p, center + rng.uniform(3, -1.5 * p.center_jitter, 1.5 * p.center_jitter)))
    vol = vol + p.noise_sigma * rng.normal(vol.size).reshape(vol.shape)
    return _normalize(vol)


def synth_nodules(n: int, seed: int, params: SynthParams | None = None) -> DatasetManifest:
    """``n`` labelled cubic volumes: bright blobs (nodules) vs. vessel-like tubes and plates."""
    if n < 2:
        raise ValueError("need at least two samples")
    p = params or SynthParams()
    rng = Stream(seed)
    pts = _grid(p.size)
    labels = (rng.uniform(n) < p.positive_fraction).astype(np.int64)
    images = np.empty((n, p.size, p.size, p.size), dtype=np.float32)
    for i in range(n):
        images[i] = synth_volume(rng, int(labels[i]), p, pts)
    return DatasetManifest(images, labels, "synthetic", seed, p.to_dict())


def middle_slice(sample, axis: int = 0):
    """Slice at ``extent // 2`` along ``axis`` (axis 0 is x)."""
    vox = sample.voxels if isinstance(sample, VolumeSample) else np.asarray(sample)
    if vox.ndim != 3:
        raise ValueError("middle_slice needs a 3-D volume")
    if not 0 <= axis < 3:
        raise ValueError(f"axis {axis} out of range")
    sl = np.take(vox, vox.shape[axis] // 2, axis=axis)
    if isinstance(sample, VolumeSample):
        return VolumeSample(np.ascontiguousarray(sl), sample.label, sample.id)
    return np.ascontiguousarray(sl)


def middle_slices(manifest: DatasetManifest, axis: int = 0) -> DatasetManifest:
    if manifest.images.ndim != 4:
        raise ValueError("dataset does not hold volumes")
    imgs = np.ascontiguousarray(np.take(manifest.images, manifest.images.shape[1 + axis] // 2, axis=1 + axis))
    params = dict(manifest.params, slice_axis=axis)
    return DatasetManifest(imgs, manifest.labels.copy(), manifest.source, manifest.seed, params,
                           manifest.split.copy())


# --------------------------------------------------------------------- splits


def stratified_order(labels: np.ndarray, seed: int) -> np.ndarray:
    """Seeded shuffle in which every class is spread evenly along the ordering."""
    labels = np.asarray(labels)
    rng = Stream(seed)
    keys = np.empty(len(labels))
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        members = members[rng.permutation(len(members))]
        keys[members] = (np.arange(len(members)) + 0.5) / len(members)
    return np.lexsort((labels, keys))


def _sizes(n: int, fractions) -> list[int]:
    raw = np.asarray(fractions, dtype=np.float64) * n
    sizes = np.floor(raw).astype(int)
    order = np.argsort(-(raw - sizes), kind="stable")
    for k in order[: n - sizes.sum()]:
        sizes[k] += 1
    return sizes.tolist()


def split(manifest: DatasetManifest, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetManifest:
    """Assign train/val/test by cutting a stratified seeded order into contiguous runs."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 or f > 1 for f in fractions):
        raise ValueError("fractions must be three values in [0, 1]")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    order = stratified_order(manifest.labels, seed)
    codes = np.empty(len(manifest), dtype=np.int64)
    start = 0
    for code, size in enumerate(_sizes(len(manifest), fractions)):
        codes[order[start:start + size]] = code
        start += size
    manifest.split = codes
    return manifest


def nested_subset(indices: np.ndarray, labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """First ``ceil(fraction * n)`` of a stratified order, so smaller subsets nest in larger ones."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    order = indices[stratified_order(labels[indices], seed)]
    k = max(2, int(np.ceil(fraction * len(indices))))
    return np.sort(order[:k])
