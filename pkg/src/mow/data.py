"""Datasets, IDX files and the with-replacement example queue."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class IdxError(ValueError):
    pass


@dataclass
class Dataset:
    examples: np.ndarray
    name: str = "dataset"
    value_range: tuple[float, float] = (-np.inf, np.inf)

    def __post_init__(self):
        self.examples = np.ascontiguousarray(self.examples, dtype=np.float64)
        if self.examples.ndim != 2 or self.examples.shape[0] < 1:
            raise ValueError("dataset needs a non-empty (count, N) matrix")
        lo, hi = self.value_range
        if self.examples.min() < lo or self.examples.max() > hi:
            raise ValueError(f"values fall outside the declared range {self.value_range}")

    def __len__(self) -> int:
        return self.examples.shape[0]

    @property
    def dim(self) -> int:
        return self.examples.shape[1]


def philox(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator keyed by ``seed`` and an optional stream path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed & (2**64 - 1), *stream])))


def make_synthetic(kind: str, size: int, params: dict | None = None, seed: int = 0) -> Dataset:
    """Desk-scale datasets.

    gauss_mix: ``components`` isotropic Gaussians with centres equally spaced
    on a circle of ``radius`` (two components sit at (+-radius, 0)), shared
    ``variance``. ring: unit circle plus Gaussian ``noise``. grid_images:
    8x8 images holding one or two Gaussian blobs, values in [0, 1].
    """
    params = dict(params or {})
    if size < 1:
        raise ValueError("size must be >= 1")
    rng = philox(seed, 7)
    if kind == "gauss_mix":
        c = int(params.pop("components", 2))
        radius = float(params.pop("radius", 3.0))
        var = float(params.pop("variance", 0.25))
        if c < 1 or var < 0:
            raise ValueError("gauss_mix needs components >= 1 and variance >= 0")
        angles = 2 * np.pi * np.arange(c) / c
        centres = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        centres[np.abs(centres) < 1e-12] = 0.0
        labels = rng.integers(0, c, size)
        x = centres[labels] + np.sqrt(var) * rng.standard_normal((size, 2))
        out = Dataset(x, "gauss_mix")
    elif kind == "ring":
        noise = float(params.pop("noise", 0.05))
        if noise < 0:
            raise ValueError("ring noise must be >= 0")
        t = rng.uniform(0, 2 * np.pi, size)
        x = np.stack([np.cos(t), np.sin(t)], axis=1) + noise * rng.standard_normal((size, 2))
        out = Dataset(x, "ring")
    elif kind == "grid_images":
        side = int(params.pop("side", 8))
        yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
        imgs = np.zeros((size, side, side))
        for i in range(size):
            for _ in range(rng.integers(1, 3)):
                cy, cx = rng.uniform(0, side - 1, 2)
                w = rng.uniform(0.8, 2.0)
                imgs[i] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * w * w))
        imgs = np.clip(imgs, 0.0, 1.0)
        out = Dataset(imgs.reshape(size, -1), "grid_images", (0.0, 1.0))
    else:
        raise ValueError(f"unknown synthetic dataset {kind!r}")
    if params:
        raise ValueError(f"unused parameters for {kind}: {sorted(params)}")
    return out


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_header(raw: bytes, path) -> tuple[int, tuple[int, ...], int]:
    if len(raw) < 4:
        raise IdxError(f"{path}: file too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise IdxError(f"{path}: bad magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxError(f"{path}: truncated header, expected {header} bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = 1
    for d in dims:
        count *= d
    if count > 2**40:
        raise IdxError(f"{path}: dimensions {dims} overflow")
    expected = header + count
    if len(raw) < expected:
        raise IdxError(f"{path}: truncated payload, expected {expected} bytes, got {len(raw)}")
    if len(raw) > expected:
        raise IdxError(f"{path}: {len(raw) - expected} trailing bytes after payload")
    return magic, dims, header


def load_idx(path) -> Dataset:
    """Read a u8 image tensor (magic 0x803); pixels are scaled to [0, 1]."""
    raw = _read_bytes(path)
    magic, dims, header = _parse_header(raw, path)
    if magic == IDX_LABELS:
        raise IdxError(f"{path}: label file (magic 0x801); use load_idx_labels")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=header)
    x = pixels.reshape(dims[0], dims[1] * dims[2]).astype(np.float64) / 255.0
    return Dataset(x, Path(path).name, (0.0, 1.0))


def load_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    magic, dims, header = _parse_header(raw, path)
    if magic != IDX_LABELS:
        raise IdxError(f"{path}: not a label file")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).copy()


def write_idx(path, images: np.ndarray) -> None:
    """Write ``(count, rows, cols)`` values in [0, 1] as a u8 IDX image file."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3:
        raise ValueError("write_idx expects (count, rows, cols)")
    payload = np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES))
        fh.write(struct.pack(">3I", *images.shape))
        fh.write(payload.tobytes())


class DataQueue:
    """Endless i.i.d. uniform draws with replacement from a dataset.

    Each draw consumes exactly one double from a Philox stream, so draws of
    3 then 2 equal one draw of 5.
    """

    def __init__(self, dataset: Dataset, seed: int = 0):
        self.dataset = dataset
        self.rng = philox(seed, 1)
        self.draws_served = 0

    def indices(self, count: int) -> np.ndarray:
        if count < 1:
            raise ValueError("count must be >= 1")
        u = self.rng.random(count)
        self.draws_served += count
        return np.minimum((u * len(self.dataset)).astype(np.int64), len(self.dataset) - 1)

    def next(self, count: int) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(count)
        return self.dataset.examples[idx], idx

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "draws_served": self.draws_served}

    def restore(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.draws_served = int(state["draws_served"])


def queue_next(queue: DataQueue, count: int) -> np.ndarray:
    return queue.next(count)[0]
