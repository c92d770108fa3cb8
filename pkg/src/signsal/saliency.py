"""Per-class input gradients and the five saliency map variants.

All maps are computed from a gradient cube ``g[c, k, i, j] = dS_c / dI[k, i, j]``
and the predicted class ``p``:

* original  ``M = max_k |g[p]|``
* positive  ``M = max_k relu(g[p])``
* negative  ``M = max_k relu(-g[p])``
* active    ``M = max_k (g[p] if g[p] == max_c g[c] else 0)``
* inactive  ``M = max_k (g[p] if g[p] == min_c g[c] else 0)``

Active and inactive values keep their sign. Ties between classes count as
the predicted class attaining the extremum.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import nn
from .errors import FormatError, ShapeError
from .tensor import DTYPE, as_tensor

KINDS = ("original", "positive", "negative", "active", "inactive")
SCORES = ("logit", "softmax")


@dataclass(frozen=True)
class GradientCube:
    values: np.ndarray  # (classes, channels, H, W)
    predicted_class: int
    image_id: int = 0


@dataclass(frozen=True)
class SaliencyMap:
    kind: str
    values: np.ndarray  # (H, W) float32
    image_id: int = 0


def score_cotangents(logits: np.ndarray, cls: int, score: str = "logit") -> np.ndarray:
    """Cotangent over the logits whose pullback is the gradient of class ``cls``'s score.

    ``score="logit"`` differentiates the raw logit; ``"softmax"`` the class
    probability, whose logit gradient is ``p_c * (e_c - p)``.
    """
    n, k = logits.shape
    onehot = np.zeros((n, k), dtype=DTYPE)
    onehot[:, cls] = 1
    if score == "logit":
        return onehot
    if score != "softmax":
        raise ValueError(f"unknown score {score!r}; expected one of {SCORES}")
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return (p[:, cls:cls + 1] * (onehot - p)).astype(DTYPE)


def gradient_cubes(store: nn.ParamStore, images, score: str = "logit"):
    """Gradient cubes for a batch of model-ready (normalized) images.

    One forward pass, then one backward pass per class over the whole batch.
    Returns ``(values, predicted)`` with ``values`` of shape (N, classes, C, H, W).
    """
    trace = nn.forward(store, images)
    n, k = trace.logits.shape
    values = np.empty((n, k, *store.config.input_shape), dtype=DTYPE)
    for c in range(k):
        values[:, c] = nn.backward_input(store, trace, score_cotangents(trace.logits, c, score))
    return values, nn.predicted_classes(trace.logits)


def compute_gradient_cube(store: nn.ParamStore, image, image_id: int = 0,
                          score: str = "logit") -> GradientCube:
    image = as_tensor(image)
    if image.shape != tuple(store.config.input_shape):
        raise ShapeError(f"image shape {image.shape} != model input shape {store.config.input_shape}")
    values, pred = gradient_cubes(store, image[None], score)
    return GradientCube(values[0], int(pred[0]), image_id)


def maps_from_gradients(values, predicted, kind: str, strict: bool = False) -> np.ndarray:
    """Vectorized map construction for (N, classes, C, H, W) gradients.

    ``strict`` applies sign filtering to the multi-class maps: active keeps
    only positive kept values (max over channels), inactive only negative ones
    (min over channels), so both stay sign-pure.
    """
    values = np.asarray(values)
    predicted = np.asarray(predicted, dtype=np.int64)
    if values.ndim != 5 or predicted.shape != (values.shape[0],):
        raise ShapeError(f"expected (N, classes, C, H, W) gradients and N predictions, "
                         f"got {values.shape} and {predicted.shape}")
    g = values[np.arange(len(values)), predicted]  # (N, C, H, W)
    zero = DTYPE(0)
    if kind == "original":
        return np.abs(g).max(axis=1)
    if kind == "positive":
        return np.maximum(g, zero).max(axis=1)
    if kind == "negative":
        return np.maximum(-g, zero).max(axis=1)
    if kind == "active":
        keep = g == values.max(axis=1)
        if strict:
            keep &= g > 0
        return np.where(keep, g, zero).max(axis=1)
    if kind == "inactive":
        keep = g == values.min(axis=1)
        if strict:
            keep &= g < 0
            return np.where(keep, g, zero).min(axis=1)
        return np.where(keep, g, zero).max(axis=1)
    raise ValueError(f"unknown map kind {kind!r}; expected one of {KINDS}")


def make_map(cube: GradientCube, kind: str, strict: bool = False) -> SaliencyMap:
    values = maps_from_gradients(cube.values[None], [cube.predicted_class], kind, strict)[0]
    return SaliencyMap(kind, values, cube.image_id)


def original_map(cube: GradientCube) -> SaliencyMap:
    return make_map(cube, "original")


def positive_map(cube: GradientCube) -> SaliencyMap:
    return make_map(cube, "positive")


def negative_map(cube: GradientCube) -> SaliencyMap:
    return make_map(cube, "negative")


def active_map(cube: GradientCube, strict: bool = False) -> SaliencyMap:
    return make_map(cube, "active", strict)


def inactive_map(cube: GradientCube, strict: bool = False) -> SaliencyMap:
    return make_map(cube, "inactive", strict)


def all_maps(cube: GradientCube, strict: bool = False) -> dict[str, SaliencyMap]:
    return {kind: make_map(cube, kind, strict) for kind in KINDS}


def normalize_for_display(saliency, kind: str | None = None) -> np.ndarray:
    """Min-max rescale to uint8 with floor rounding.

    Active and inactive maps are rescaled by absolute value. A constant map
    renders as all zeros.
    """
    if isinstance(saliency, SaliencyMap):
        kind = kind or saliency.kind
        saliency = saliency.values
    v = np.asarray(saliency, dtype=np.float64)
    if kind in ("active", "inactive"):
        v = np.abs(v)
    if v.size == 0 or v.max() == v.min():
        return np.zeros(v.shape, dtype=np.uint8)
    lo, hi = v.min(), v.max()
    return np.floor((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


# -- map archive --------------------------------------------------------------
# File: b"SMAP", uint32 version, uint32 record count; then per record
# int64 image_id, uint8 kind index, uint32 height, uint32 width and
# height*width little-endian float32 values.

_MAGIC = b"SMAP"
_VERSION = 1
_FILE_HEADER = struct.Struct("<4sII")
_RECORD_HEADER = struct.Struct("<qBII")


def write_map_archive(path, maps: Iterable[SaliencyMap]) -> Path:
    maps = list(maps)
    with open(path, "wb") as fh:
        fh.write(_FILE_HEADER.pack(_MAGIC, _VERSION, len(maps)))
        for m in maps:
            values = np.asarray(m.values, dtype="<f4")
            h, w = values.shape
            fh.write(_RECORD_HEADER.pack(int(m.image_id), KINDS.index(m.kind), h, w))
            fh.write(values.tobytes())
    return Path(path)


def read_map_archive(path) -> list[SaliencyMap]:
    data = Path(path).read_bytes()
    if len(data) < _FILE_HEADER.size:
        raise FormatError(f"{path}: truncated map archive header")
    magic, version, count = _FILE_HEADER.unpack_from(data, 0)
    if magic != _MAGIC or version != _VERSION:
        raise FormatError(f"{path}: not a version-{_VERSION} map archive")
    pos, maps = _FILE_HEADER.size, []
    for _ in range(count):
        if pos + _RECORD_HEADER.size > len(data):
            raise FormatError(f"{path}: truncated record header")
        image_id, kind_idx, h, w = _RECORD_HEADER.unpack_from(data, pos)
        pos += _RECORD_HEADER.size
        if kind_idx >= len(KINDS) or pos + 4 * h * w > len(data):
            raise FormatError(f"{path}: corrupt record for image {image_id}")
        values = np.frombuffer(data, dtype="<f4", count=h * w, offset=pos).reshape(h, w).astype(DTYPE)
        pos += 4 * h * w
        maps.append(SaliencyMap(KINDS[kind_idx], values, image_id))
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return maps
