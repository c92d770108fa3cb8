"""Versioned binary checkpoints.

Layout (little-endian)::

    magic b"SSCK" | uint32 version | 32-byte SHA-256 of the model config
    uint32 tensor count
    per tensor: uint16 name length | name (utf-8) | uint8 rank | uint32 dims[rank] | float32 data

Normalization statistics, when present, travel as the tensors ``norm.mean``
and ``norm.std``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .data import NormalizationStats
from .errors import ConfigError, FormatError
from .nn import ModelConfig, ParamStore, param_shapes

MAGIC = b"SSCK"
VERSION = 1
_HEADER = struct.Struct("<4sI32sI")
_STATS_KEYS = ("norm.mean", "norm.std")


def save_checkpoint(path, store: ParamStore, stats: NormalizationStats | None = None) -> Path:
    tensors = dict(store.params)
    if stats is not None:
        tensors[_STATS_KEYS[0]], tensors[_STATS_KEYS[1]] = stats.mean, stats.std
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, store.config.digest(), len(tensors)))
        for name, value in tensors.items():
            value = np.asarray(value, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)) + encoded)
            fh.write(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
            fh.write(value.tobytes())
    return Path(path)


def load_checkpoint(path, config: ModelConfig):
    """Read a checkpoint written for ``config``. Returns ``(store, stats_or_None)``."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, digest, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if digest != config.digest():
        raise ConfigError(f"{path}: checkpoint was written for a different model configuration")

    pos, tensors = _HEADER.size, {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(data):
                raise FormatError(f"{path}: tensor {name!r} is truncated")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")

    stats = None
    if all(k in tensors for k in _STATS_KEYS):
        stats = NormalizationStats(tensors.pop(_STATS_KEYS[0]), tensors.pop(_STATS_KEYS[1]))

    expected = {name: shape for name, shape, _ in param_shapes(config)}
    if set(expected) != set(tensors):
        raise FormatError(f"{path}: parameter names do not match the configuration")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise FormatError(f"{path}: {name} has shape {tensors[name].shape}, expected {shape}")
    params = {name: tensors[name] for name in expected}
    return ParamStore(config, params), stats
