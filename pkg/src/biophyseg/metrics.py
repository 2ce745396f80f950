"""Overlap and boundary-distance metrics over binary region masks."""

from __future__ import annotations

import csv
import math

import numpy as np
from scipy import ndimage

REGIONS = ("TC", "WT", "ET")
CSV_COLUMNS = ("case_id", "region", "dice", "hd95")


def _pair(pred, truth):
    a = np.asarray(pred, dtype=bool)
    b = np.asarray(truth, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask dims differ: {a.shape} vs {b.shape}")
    return a, b


def dice_score(pred, truth) -> float:
    """2|A & B| / (|A| + |B|); two empty masks score 1."""
    a, b = _pair(pred, truth)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def nearest_rank(values: np.ndarray, q: float = 95.0) -> float:
    """Nearest-rank percentile: the ceil(q/100 * n)-th smallest value."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    k = max(1, math.ceil(q / 100.0 * v.size))
    return float(v[k - 1])


def _directed(a, b, spacing):
    # distance from every voxel to the nearest foreground voxel of b
    dist = ndimage.distance_transform_edt(~b, sampling=spacing)
    return dist[a]


def hd95(pred, truth, spacing=1.0) -> float:
    """Symmetric 95th-percentile Hausdorff distance over foreground voxels.

    Returns NaN when either mask is empty; callers exclude such cases.
    """
    a, b = _pair(pred, truth)
    if not a.any() or not b.any():
        return math.nan
    sampling = (spacing,) * a.ndim if np.isscalar(spacing) else tuple(spacing)
    return max(nearest_rank(_directed(a, b, sampling)), nearest_rank(_directed(b, a, sampling)))


def case_rows(case_id, pred_regions: dict, true_regions: dict, spacing=1.0) -> list[dict]:
    rows = []
    for region in REGIONS:
        p, t = pred_regions[region], true_regions[region]
        rows.append({"case_id": case_id, "region": region,
                     "dice": dice_score(p, t), "hd95": hd95(p, t, spacing)})
    return rows


def summarise(rows: list[dict]) -> list[dict]:
    """Mean and standard deviation per region; NaN distances are excluded and counted."""
    out = []
    for stat in ("mean", "std"):
        for region in REGIONS:
            dice = np.array([r["dice"] for r in rows if r["region"] == region], dtype=float)
            hd = np.array([r["hd95"] for r in rows if r["region"] == region], dtype=float)
            hd = hd[np.isfinite(hd)]
            fn = np.mean if stat == "mean" else np.std
            out.append({"case_id": stat, "region": region,
                        "dice": float(fn(dice)) if dice.size else math.nan,
                        "hd95": float(fn(hd)) if hd.size else math.nan})
    return out


def excluded_count(rows: list[dict]) -> int:
    return sum(1 for r in rows if not math.isfinite(r["hd95"]))


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path, rows: list[dict], columns=CSV_COLUMNS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
