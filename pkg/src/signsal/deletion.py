"""Black- and white-deletion benchmark.

Pixels are ranked once per image from its saliency map and then replaced
cumulatively, in raw [0, 1] image space, by black (0.0) or white (1.0) in all
channels. The fraction axis counts pixels of the whole image: at fraction
``f`` the first ``round_half_up(f * H * W)`` ranked pixels are replaced, capped
at the number of eligible pixels. *Allegiance* at ``f`` is the share of images
whose prediction still equals the prediction on the unmodified image.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .data import NormalizationStats, Split
from .errors import ConfigError
from .saliency import KINDS, SaliencyMap, gradient_cubes, maps_from_gradients

COLORS = {"black": 0.0, "white": 1.0}
DEFAULT_FRACTIONS = (0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
DEFAULT_PAIRS = (
    ("original", "black"), ("positive", "black"), ("active", "black"),
    ("original", "white"), ("negative", "white"), ("inactive", "white"),
)
INACTIVE_ORDERS = ("ascending", "magnitude")


@dataclass(frozen=True)
class DeletionPlan:
    image_id: int
    kind: str
    coords: np.ndarray  # (eligible_count, 2) int64 (row, col), most important first
    eligible_count: int
    total_pixels: int

    @property
    def eligible_fraction(self) -> float:
        return self.eligible_count / self.total_pixels


@dataclass
class DeletionCurve:
    kind: str
    color: str
    fractions: np.ndarray
    allegiance: np.ndarray
    auc: float = 0.0
    mean_eligible_fraction: float = 1.0
    predictions: np.ndarray | None = field(default=None, repr=False)  # (fractions, images)


def rank_pixels(saliency: SaliencyMap, inactive_order: str = "ascending") -> DeletionPlan:
    """Order a map's pixels for deletion, most important first.

    Descending value for every kind except inactive, which goes ascending (most
    negative first) or, with ``inactive_order="magnitude"``, by descending
    absolute value. Original maps rank every pixel; the other kinds only the
    nonzero ones. Ties keep row-major order.
    """
    v = np.asarray(saliency.values)
    h, w = v.shape
    flat = v.ravel()
    eligible = np.arange(flat.size) if saliency.kind == "original" else np.flatnonzero(flat != 0)
    if saliency.kind == "inactive":
        if inactive_order not in INACTIVE_ORDERS:
            raise ValueError(f"inactive_order must be one of {INACTIVE_ORDERS}")
        key = flat if inactive_order == "ascending" else -np.abs(flat)
    else:
        key = -flat
    order = eligible[np.argsort(key[eligible], kind="stable")]
    coords = np.stack(np.divmod(order, w), axis=1).astype(np.int64)
    return DeletionPlan(saliency.image_id, saliency.kind, coords, len(order), h * w)


def round_half_up(x: Fraction) -> int:
    return int((x + Fraction(1, 2)).__floor__())


def deletion_count(fraction: float, plan: DeletionPlan) -> int:
    """Pixels to replace at ``fraction``; the fraction's decimal form is used so
    that e.g. 0.15 of 10 pixels rounds to 2."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    wanted = round_half_up(Fraction(repr(float(fraction))) * plan.total_pixels)
    return min(wanted, plan.eligible_count)


def apply_deletion(image, plan: DeletionPlan, fraction: float, color: str) -> np.ndarray:
    """Copy of the raw (C, H, W) image with the plan's leading pixels replaced."""
    if color not in COLORS:
        raise ValueError(f"color must be one of {tuple(COLORS)}, got {color!r}")
    n = deletion_count(fraction, plan)
    out = np.array(image, dtype=np.float32, copy=True)
    rows, cols = plan.coords[:n, 0], plan.coords[:n, 1]
    out[:, rows, cols] = COLORS[color]
    return out


def auc(curve_or_fractions, allegiance=None) -> float:
    """Trapezoidal area under allegiance vs. fraction, extended flat to 1.

    Evaluated in exact rational arithmetic so a constant-1 curve gives
    exactly 1.0.
    """
    if allegiance is None:
        fractions, allegiance = curve_or_fractions.fractions, curve_or_fractions.allegiance
    else:
        fractions = curve_or_fractions
    xs = [Fraction(float(f)) for f in fractions]
    ys = [Fraction(float(a)) for a in allegiance]
    if len(xs) != len(ys) or not xs:
        raise ValueError("fractions and allegiance must be non-empty and equally long")
    if xs[-1] < 1:
        xs.append(Fraction(1))
        ys.append(ys[-1])
    area = sum((x1 - x0) * (y0 + y1) / 2 for x0, x1, y0, y1 in zip(xs, xs[1:], ys, ys[1:]))
    return float(area)


@dataclass
class MapSet:
    """Saliency maps of every image in a split, plus the unmodified predictions."""

    ids: np.ndarray
    predictions: np.ndarray
    maps: dict[str, np.ndarray]  # kind -> (N, H, W)

    def saliency_map(self, kind: str, index: int) -> SaliencyMap:
        return SaliencyMap(kind, self.maps[kind][index], int(self.ids[index]))


def compute_maps(store: nn.ParamStore, dataset: Split, stats: NormalizationStats | None = None,
                 kinds: Sequence[str] = KINDS, score: str = "logit", strict: bool = False,
                 batch_size: int = 64) -> MapSet:
    """Gradient cubes are built chunk by chunk and reduced to maps right away."""
    kinds = tuple(dict.fromkeys(kinds))
    h, w = dataset.images.shape[2:]
    maps = {k: np.empty((len(dataset), h, w), dtype=np.float32) for k in kinds}
    preds = np.empty(len(dataset), dtype=np.int64)
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, min(start + batch_size, len(dataset)))
        x = dataset.images[sl]
        if stats is not None:
            x = stats.apply(x)
        values, p = gradient_cubes(store, x, score)
        preds[sl] = p
        for k in kinds:
            maps[k][sl] = maps_from_gradients(values, p, k, strict)
    return MapSet(dataset.ids.copy(), preds, maps)


def _check_dataset(dataset: Split) -> None:
    if len(dataset) == 0:
        raise ConfigError("deletion benchmark needs a non-empty dataset")


def run_curve(store: nn.ParamStore, dataset: Split, map_kind: str, color: str,
              fractions: Sequence[float] = DEFAULT_FRACTIONS, *,
              stats: NormalizationStats | None = None, maps: MapSet | None = None,
              score: str = "logit", strict: bool = False, inactive_order: str = "ascending",
              batch_size: int = 64) -> DeletionCurve:
    """Allegiance curve for one (map kind, color) pair over ``dataset``.

    Rankings come from the unmodified images and are never refreshed.
    """
    _check_dataset(dataset)
    if color not in COLORS:
        raise ValueError(f"color must be one of {tuple(COLORS)}, got {color!r}")
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.ndim != 1 or len(fractions) == 0 or fractions[0] != 0.0 \
            or np.any(np.diff(fractions) <= 0) or fractions[-1] > 1.0:
        raise ValueError("fractions must be strictly increasing in [0, 1] and start at 0")
    if maps is None:
        maps = compute_maps(store, dataset, stats, (map_kind,), score, strict, batch_size)
    if map_kind not in maps.maps:
        raise ConfigError(f"map set has no {map_kind!r} maps")

    plans = [rank_pixels(maps.saliency_map(map_kind, i), inactive_order) for i in range(len(dataset))]
    original = maps.predictions
    value = np.float32(COLORS[color])
    predictions = np.empty((len(fractions), len(dataset)), dtype=np.int64)
    for fi, f in enumerate(fractions):
        occluded = dataset.images.copy()
        for i, plan in enumerate(plans):
            n = deletion_count(f, plan)
            if n:
                occluded[i, :, plan.coords[:n, 0], plan.coords[:n, 1]] = value
        predictions[fi] = nn.predicted_classes(nn.logits_for(store, occluded, stats, batch_size))
    allegiance = (predictions == original[None, :]).mean(axis=1)
    curve = DeletionCurve(map_kind, color, fractions, allegiance,
                          mean_eligible_fraction=float(np.mean([p.eligible_fraction for p in plans])),
                          predictions=predictions)
    curve.auc = auc(curve)
    return curve


def run_benchmark(store: nn.ParamStore, dataset: Split,
                  pairs: Sequence[tuple[str, str]] = DEFAULT_PAIRS,
                  fractions: Sequence[float] = DEFAULT_FRACTIONS, *,
                  stats: NormalizationStats | None = None, score: str = "logit",
                  strict: bool = False, inactive_order: str = "ascending",
                  batch_size: int = 64, maps: MapSet | None = None) -> list[DeletionCurve]:
    """All requested curves, sharing one pass of gradient cubes."""
    _check_dataset(dataset)
    if maps is None:
        maps = compute_maps(store, dataset, stats, [k for k, _ in pairs], score, strict, batch_size)
    return [run_curve(store, dataset, kind, color, fractions, stats=stats, maps=maps,
                      inactive_order=inactive_order, batch_size=batch_size)
            for kind, color in pairs]


def subsample(dataset: Split, size: int | None, seed: int) -> Split:
    """Seeded subset of ``size`` images, kept in original order."""
    if size is None or size >= len(dataset):
        return dataset
    rng = np.random.default_rng(seed)
    return dataset.subset(np.sort(rng.choice(len(dataset), size=size, replace=False)))


# -- CSV output ---------------------------------------------------------------

def write_curve_csv(path, curve: DeletionCurve) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["kind", "color", "fraction", "allegiance"])
        for f, a in zip(curve.fractions, curve.allegiance):
            writer.writerow([curve.kind, curve.color, f"{f:.6f}", f"{a:.6f}"])
    return Path(path)


def write_auc_summary(path, curves: Sequence[DeletionCurve]) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["kind", "color", "auc"])
        for c in curves:
            writer.writerow([c.kind, c.color, f"{c.auc:.6f}"])
    return Path(path)


def read_curve_csv(path) -> DeletionCurve:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty curve file")
    fractions = np.array([float(r["fraction"]) for r in rows])
    allegiance = np.array([float(r["allegiance"]) for r in rows])
    curve = DeletionCurve(rows[0]["kind"], rows[0]["color"], fractions, allegiance)
    curve.auc = auc(curve)
    return curve


def read_auc_summary(path) -> dict[tuple[str, str], float]:
    with open(path, newline="") as fh:
        return {(r["kind"], r["color"]): float(r["auc"]) for r in csv.DictReader(fh)}
