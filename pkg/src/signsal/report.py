"""Collate training metrics, galleries and benchmark output into one markdown report."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from .deletion import read_auc_summary, read_curve_csv
from .saliency import read_map_archive

PASS, FAIL, ABSENT = "PASS", "FAIL", "n/a"


def identity_check(archive) -> tuple[str, int]:
    """max(positive, negative) == original for every image in a map archive."""
    by_image = defaultdict(dict)
    for m in read_map_archive(archive):
        by_image[m.image_id][m.kind] = m.values
    checked = 0
    for kinds in by_image.values():
        if {"original", "positive", "negative"} <= kinds.keys():
            checked += 1
            if not np.array_equal(np.maximum(kinds["positive"], kinds["negative"]), kinds["original"]):
                return FAIL, checked
    return (PASS if checked else ABSENT), checked


def ordering_check(aucs: dict[tuple[str, str], float], color: str, signed: tuple[str, ...]) -> str:
    base = aucs.get(("original", color))
    others = [aucs[(k, color)] for k in signed if (k, color) in aucs]
    if base is None or not others:
        return ABSENT
    return PASS if all(a < base for a in others) else FAIL


def saturation_check(curve) -> str:
    """Flat tail: the last two samples of the curve agree."""
    if len(curve.allegiance) < 2:
        return ABSENT
    return PASS if curve.allegiance[-1] == curve.allegiance[-2] else FAIL


def build_report(train_dir=None, saliency_dir=None, bench_dir=None) -> tuple[str, list[str]]:
    """Return the markdown text and the list of missing inputs."""
    lines = ["# Saliency run report", ""]
    missing: list[str] = []

    lines += ["## Training", ""]
    metrics = Path(train_dir) / "metrics.csv" if train_dir else None
    if metrics and metrics.is_file():
        with open(metrics, newline="") as fh:
            rows = list(csv.DictReader(fh))
        lines.append(f"Metrics: `{metrics}` ({len(rows)} epochs)")
        if rows:
            last = rows[-1]
            lines.append(f"Final epoch {last['epoch']}: train loss {last['train_loss']}, "
                         f"train acc {last['train_acc']}, test acc {last['test_acc']}")
        lines.append("Status: complete")
    else:
        missing.append("training metrics")
        lines.append("Status: ABSENT (no metrics.csv)")
    lines.append("")

    lines += ["## Saliency gallery", ""]
    identity = ABSENT
    gallery = Path(saliency_dir) if saliency_dir else None
    if gallery and gallery.is_dir() and any(gallery.glob("*.pgm")):
        for f in sorted(gallery.glob("*.p[gp]m")):
            lines.append(f"- `{f}`")
        archive = gallery / "maps.smap"
        if archive.is_file():
            identity, n = identity_check(archive)
            lines.append(f"\nIdentity checked on {n} images.")
        lines.append("Status: complete")
    else:
        missing.append("saliency gallery")
        lines.append("Status: ABSENT (no exported maps)")
    lines.append("")

    lines += ["## Deletion benchmark", ""]
    aucs: dict[tuple[str, str], float] = {}
    saturation = []
    bench = Path(bench_dir) if bench_dir else None
    summary = bench / "auc_summary.csv" if bench else None
    if summary and summary.is_file():
        aucs = read_auc_summary(summary)
        lines += ["| kind | color | AUC |", "|---|---|---|"]
        lines += [f"| {k} | {c} | {a:.6f} |" for (k, c), a in aucs.items()]
        for path in sorted(bench.glob("curve_*.csv")):
            curve = read_curve_csv(path)
            if curve.kind in ("active", "inactive"):
                saturation.append(saturation_check(curve))
        lines.append("\nStatus: complete")
    else:
        missing.append("benchmark AUC summary")
        lines.append("Status: ABSENT (no auc_summary.csv)")
    lines.append("")

    sat = ABSENT if not saturation else (PASS if all(s == PASS for s in saturation) else FAIL)
    lines += [
        "## Checklist", "",
        f"- map identity max(positive, negative) = original: {identity}",
        f"- black-deletion ordering: {ordering_check(aucs, 'black', ('positive', 'active'))}",
        f"- white-deletion ordering: {ordering_check(aucs, 'white', ('negative', 'inactive'))}",
        f"- saturation observed (active/inactive): {sat}",
        "",
    ]
    if missing:
        lines += ["## Missing inputs", ""] + [f"- {m}" for m in missing] + [""]
    return "\n".join(lines), missing
