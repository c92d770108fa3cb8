"""Dataset ingestion, normalization and Netpbm export.

CIFAR-10 is read from its canonical binary batches: every record is 3073
bytes, one label byte followed by 1024 red, 1024 green and 1024 blue bytes,
each plane row-major.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_CLASSES = ("airplane", "automobile", "bird", "cat", "deer",
                 "dog", "frog", "horse", "ship", "truck")
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"


@dataclass(frozen=True)
class LabeledImage:
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    label: int
    id: int


@dataclass
class Split:
    """A batch of labeled images stored as stacked arrays."""

    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    ids: np.ndarray     # (N,) int64, unique within the split
    num_classes: int = 10

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]), int(self.ids[i]))

    def subset(self, indices) -> "Split":
        indices = np.asarray(indices, dtype=np.int64)
        return Split(self.images[indices], self.labels[indices], self.ids[indices], self.num_classes)

    def index_of(self, image_id: int) -> int:
        hits = np.flatnonzero(self.ids == image_id)
        if len(hits) == 0:
            raise KeyError(image_id)
        return int(hits[0])


def read_cifar_batch(path, id_offset: int = 0) -> Split:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % RECORD_BYTES:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of {RECORD_BYTES}")
    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.flatnonzero(labels > 9)[0])
        raise FormatError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    images = records[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(np.float32) / np.float32(255)
    ids = np.arange(id_offset, id_offset + len(labels), dtype=np.int64)
    return Split(images, labels, ids, 10)


def _concat(splits: list[Split]) -> Split:
    return Split(np.concatenate([s.images for s in splits]),
                 np.concatenate([s.labels for s in splits]),
                 np.concatenate([s.ids for s in splits]), 10)


def load_cifar10(directory, splits=("train", "test")) -> tuple[Split, ...]:
    """Load the requested CIFAR-10 splits (``"train"`` and/or ``"test"``) in order.

    Image ids are the record index within the split.
    """
    directory = Path(directory)
    out = []
    for name in splits:
        files = TRAIN_FILES if name == "train" else (TEST_FILE,)
        missing = [f for f in files if not (directory / f).is_file()]
        if missing:
            raise FileNotFoundError(f"{directory}: missing CIFAR-10 files {', '.join(missing)}")
        parts, offset = [], 0
        for f in files:
            part = read_cifar_batch(directory / f, id_offset=offset)
            offset += len(part)
            parts.append(part)
        out.append(_concat(parts))
    return tuple(out)


def synthetic_dataset(num_images: int, num_classes: int, seed: int,
                      image_shape=(3, 16, 16), noise: float = 0.25) -> Split:
    """Class-conditional patterns a small CNN can separate perfectly.

    Labels cycle round-robin over the classes. Class ``c`` lights up cell ``c``
    of a square grid over the image, on a uniform noise background, with a
    class-specific tint per channel.
    """
    if num_images < 0 or num_classes < 1:
        raise ConfigError(f"invalid synthetic dataset size {num_images} / classes {num_classes}")
    c, h, w = image_shape
    rng = np.random.default_rng(seed)
    grid = int(np.ceil(np.sqrt(num_classes)))
    ch, cw = h // grid, w // grid
    if ch < 1 or cw < 1:
        raise ConfigError(f"image {h}x{w} too small for {num_classes} class cells")
    labels = np.arange(num_images, dtype=np.int64) % num_classes
    images = rng.uniform(0.0, noise, size=(num_images, c, h, w)).astype(np.float32)
    tint = 0.6 + 0.4 * ((np.arange(num_classes)[:, None] + np.arange(c)[None, :]) % 2)
    for i, label in enumerate(labels):
        r, q = divmod(int(label), grid)
        cell = images[i, :, r * ch:(r + 1) * ch, q * cw:(q + 1) * cw]
        cell += tint[label][:, None, None].astype(np.float32)
    np.clip(images, 0.0, 1.0, out=images)
    return Split(images, labels, np.arange(num_images, dtype=np.int64), num_classes)


@dataclass(frozen=True)
class NormalizationStats:
    mean: np.ndarray  # (C,) float32
    std: np.ndarray   # (C,) float32

    def __post_init__(self):
        if np.any(~(np.asarray(self.std) > 0)):
            raise ConfigError(f"normalization std must be positive per channel, got {self.std}")

    def apply(self, images) -> np.ndarray:
        return normalize(images, self)


def compute_stats(images) -> NormalizationStats:
    """Per-channel mean and population std of an (N, C, H, W) split, in float64."""
    x = np.asarray(images if not isinstance(images, Split) else images.images)
    if x.ndim != 4 or len(x) == 0:
        raise ConfigError("compute_stats needs a non-empty (N, C, H, W) array")
    per_channel = x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1).astype(np.float64)
    mean = per_channel.mean(axis=1)
    std = np.sqrt(((per_channel - mean[:, None]) ** 2).mean(axis=1))
    if np.any(std <= 0):
        raise ConfigError(f"channel(s) {np.flatnonzero(std <= 0).tolist()} have zero variance")
    return NormalizationStats(mean.astype(np.float32), std.astype(np.float32))


def normalize(images, stats: NormalizationStats) -> np.ndarray:
    x = np.asarray(images, dtype=np.float32)
    shape = (-1, 1, 1)
    return (x - stats.mean.reshape(shape)) / stats.std.reshape(shape)


# -- Netpbm -----------------------------------------------------------------

def to_bytes_rounded(image) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-up, so ``k / 255`` maps back to ``k``."""
    x = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def write_pnm(path, pixels: np.ndarray) -> None:
    """Write a uint8 (H, W) array as P5 or an (H, W, 3) array as P6."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim == 2:
        magic = "P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = "P6"
    else:
        raise ValueError(f"cannot write pixel array of shape {pixels.shape}")
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{magic} {w} {h} 255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a binary P5/P6 file with maxval 255."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    pos += 1  # single whitespace byte before the raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in ("P5", "P6") or maxval != 255:
        raise FormatError(f"{path}: unsupported netpbm header {tokens}")
    depth = 3 if magic == "P6" else 1
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h * depth, offset=pos)
    return raster.reshape(h, w, 3) if depth == 3 else raster.reshape(h, w)


def export_image(array, path, format: str | None = None) -> Path:
    """Export a raw (C, H, W) image as PPM or a 2-D saliency map as PGM.

    Images are rounded to the nearest byte; maps must already be uint8 (use
    :func:`signsal.saliency.normalize_for_display`) or are rendered with it.
    """
    path = Path(path)
    array = np.asarray(array)
    fmt = format or path.suffix.lstrip(".").lower()
    if fmt == "ppm":
        if array.ndim != 3 or array.shape[0] not in (1, 3):
            raise ValueError(f"PPM export needs a (3, H, W) image, got {array.shape}")
        rgb = to_bytes_rounded(np.broadcast_to(array, (3, *array.shape[1:])))
        write_pnm(path, rgb.transpose(1, 2, 0))
    elif fmt == "pgm":
        if array.ndim != 2:
            raise ValueError(f"PGM export needs a 2-D map, got {array.shape}")
        if array.dtype != np.uint8:
            from .saliency import normalize_for_display
            array = normalize_for_display(array)
        write_pnm(path, array)
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    return path


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
