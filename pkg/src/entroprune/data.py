"""Labeled image datasets: procedural synthesis and the ELTD container.

ELTD layout (little-endian)::

    b"ELTD", u32 version, u32 N, u16 H, u16 W, u16 C, u16 num_classes,
    N*H*W*C float32 pixels, N u32 labels
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import CorruptFileError, FormatError, VersionError

DATASET_MAGIC = b"ELTD"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIHHHH")


class DataError(ValueError):
    pass


@dataclass
class LabeledTensorDataset:
    images: np.ndarray  # [N, H, W, C] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [N, H, W, C], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, split: str | None = None) -> "LabeledTensorDataset":
        idx = np.asarray(idx)
        return LabeledTensorDataset(self.images[idx], self.labels[idx], self.num_classes,
                                    split or self.split)

    def head(self, n: int) -> "LabeledTensorDataset":
        return self.subset(np.arange(min(n, len(self))))


def encode_dataset(ds: LabeledTensorDataset) -> bytes:
    N, H, W, C = ds.images.shape
    head = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, N, H, W, C, ds.num_classes)
    return (head + ds.images.astype("<f4").tobytes()
            + ds.labels.astype("<u4").tobytes())


def decode_dataset(buf: bytes, split: str = "train") -> LabeledTensorDataset:
    if len(buf) < 4:
        raise CorruptFileError("dataset file shorter than its magic number")
    if buf[:4] != DATASET_MAGIC:
        raise FormatError(f"expected magic {DATASET_MAGIC!r}, found {buf[:4]!r}")
    if len(buf) < _HEADER.size:
        raise CorruptFileError("truncated dataset header")
    _, version, N, H, W, C, K = _HEADER.unpack_from(buf)
    if version != DATASET_VERSION:
        raise VersionError(f"unsupported dataset version {version}")
    n_pix = N * H * W * C
    expected = _HEADER.size + 4 * n_pix + 4 * N
    if len(buf) != expected:
        raise CorruptFileError(f"dataset payload is {len(buf)} bytes, expected {expected}")
    images = np.frombuffer(buf, "<f4", n_pix, _HEADER.size).reshape(N, H, W, C)
    labels = np.frombuffer(buf, "<u4", N, _HEADER.size + 4 * n_pix)
    return LabeledTensorDataset(images.copy(), labels.astype(np.int64), K, split)


def save_dataset(ds: LabeledTensorDataset, path: str | Path) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def load_dataset(path: str | Path, split: str = "train") -> LabeledTensorDataset:
    return decode_dataset(Path(path).read_bytes(), split)


# ---------------------------------------------------------------------------
# procedural synthesis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Procedural texture classes.

    Each class owns a pair of oriented gratings, one for each half of the
    image (top/bottom).  Classes share gratings, so a class is identified
    only by the combination of what appears where, which forces the model
    to relate distant patches.
    """

    classes: int = 10
    per_class: int = 300
    image_size: int = 16
    channels: int = 3
    noise: float = 0.35
    seed: int = 0

    def validate(self) -> None:
        if self.classes < 2 or self.per_class < 1:
            raise DataError("need >= 2 classes and >= 1 sample per class")
        if self.image_size < 4 or self.image_size % 2:
            raise DataError("image_size must be an even number >= 4")
        if self.channels < 1:
            raise DataError("channels must be >= 1")
        if not 0 <= self.noise <= 5:
            raise DataError("noise must lie in [0, 5]")
        if self.classes > len(_GRATINGS) * (len(_GRATINGS) - 1):
            raise DataError(f"at most {len(_GRATINGS) * (len(_GRATINGS) - 1)} classes supported")


# (orientation in radians, cycles per image)
_GRATINGS = [(0.0, 2.0), (np.pi / 2, 2.0), (np.pi / 4, 3.0), (3 * np.pi / 4, 3.0), (0.0, 5.0)]


def _class_pairs(n: int) -> list[tuple[int, int]]:
    pairs = [(a, b) for a in range(len(_GRATINGS)) for b in range(len(_GRATINGS)) if a != b]
    order = np.random.default_rng(12345).permutation(len(pairs))
    return [pairs[i] for i in order[:n]]


def _grating(size: int, theta: float, freq: float, phase: np.ndarray) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    proj = (np.cos(theta) * xx + np.sin(theta) * yy) / size
    return np.sin(2 * np.pi * freq * proj[None] + phase[:, None, None])


def synthesize(spec: SynthSpec) -> LabeledTensorDataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    S, C = spec.image_size, spec.channels
    pairs = _class_pairs(spec.classes)
    n = spec.classes * spec.per_class
    labels = np.repeat(np.arange(spec.classes), spec.per_class)
    images = np.empty((n, S, S, C), dtype=np.float64)
    half = S // 2
    for k, (top, bottom) in enumerate(pairs):
        sl = slice(k * spec.per_class, (k + 1) * spec.per_class)
        m = spec.per_class
        canvas = np.empty((m, S, S))
        for g, rows in ((top, slice(0, half)), (bottom, slice(half, S))):
            theta, freq = _GRATINGS[g]
            phase = rng.uniform(0, 2 * np.pi, m)
            canvas[:, rows] = _grating(S, theta, freq, phase)[:, rows]
        gain = rng.uniform(0.6, 1.0, (m, 1, 1, C))
        img = 0.5 + 0.35 * canvas[..., None] * gain
        img += spec.noise * 0.35 * rng.standard_normal((m, S, S, C))
        images[sl] = img
    perm = rng.permutation(n)
    return LabeledTensorDataset(np.clip(images[perm], 0.0, 1.0).astype(np.float32),
                                labels[perm], spec.classes, "all")


def split_dataset(ds: LabeledTensorDataset, holdout: float = 0.2
                  ) -> tuple[LabeledTensorDataset, LabeledTensorDataset]:
    """Deterministic split: the last ``holdout`` fraction becomes the test split."""
    n_test = int(round(len(ds) * holdout))
    cut = len(ds) - n_test
    return (ds.subset(np.arange(cut), "train"), ds.subset(np.arange(cut, len(ds)), "test"))
