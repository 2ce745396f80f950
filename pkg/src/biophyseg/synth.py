"""Synthetic tumour cases: simulated density inside an ellipsoidal brain mask.

Labels come from density thresholds t_ET > t_TC > t_WT, so the regions nest
ET <= TC <= WT.  One-hot channel order is (normal, TC, WT, ET) where each
voxel is assigned to the innermost region containing it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fields import Field3D
from .growth import GrowthParams, gaussian_bump, simulate
from .losses import D_RANGE, RHO_RANGE

DEFAULT_THRESHOLDS = (0.6, 0.35, 0.1)
CHANNEL_NAMES = ("u", "1-u", "u^2", "sqrt(u)")
CLASS_NAMES = ("normal", "TC", "WT", "ET")


class EmptyRegionError(ValueError):
    """Thresholding produced an empty whole-tumour region."""


@dataclass
class SynthCase:
    density: Field3D
    inputs: np.ndarray  # (4, H, W, D)
    labels: np.ndarray  # (4, H, W, D) one-hot
    meta: dict = field(default_factory=dict)

    @property
    def dims(self):
        return self.density.dims


def ellipsoid_mask(dims, semi_axes=None) -> np.ndarray:
    centre = [(n - 1) / 2.0 for n in dims]
    if semi_axes is None:
        semi_axes = [0.45 * n for n in dims]
    grids = np.meshgrid(*(np.arange(n, dtype=float) for n in dims), indexing="ij")
    r = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, centre, semi_axes))
    return r <= 1.0


def region_masks(u: np.ndarray, thresholds=DEFAULT_THRESHOLDS):
    """(ET, TC, WT) boolean masks from a density field."""
    t_et, t_tc, t_wt = thresholds
    if not t_et > t_tc > t_wt > 0:
        raise ValueError(f"thresholds must be strictly decreasing and positive, got {thresholds}")
    return u > t_et, u > t_tc, u > t_wt


def one_hot_from_regions(et, tc, wt) -> np.ndarray:
    y = np.zeros((4,) + et.shape)
    y[3] = et
    y[1] = tc & ~et
    y[2] = wt & ~tc
    y[0] = ~wt
    return y


def regions_from_classes(classes: np.ndarray) -> dict[str, np.ndarray]:
    """TC/WT/ET masks from a per-voxel class index map (0 normal .. 3 ET)."""
    return {"TC": (classes == 1) | (classes == 3),
            "WT": classes > 0,
            "ET": classes == 3}


def labels_from_density(u: np.ndarray, thresholds=DEFAULT_THRESHOLDS) -> np.ndarray:
    et, tc, wt = region_masks(u, thresholds)
    if not wt.any():
        raise EmptyRegionError("whole-tumour region is empty after thresholding")
    return one_hot_from_regions(et, tc, wt)


def zscore_nonzero(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    nz = x != 0
    if nz.any():
        vals = x[nz]
        out[nz] = (vals - vals.mean()) / vals.std()
    return out


def pseudo_modalities(u: np.ndarray, mask: np.ndarray, noise: float, rng) -> np.ndarray:
    """Four noisy monotone transforms of the density, z-scored inside the mask."""
    uc = np.clip(u, 0.0, 1.0)
    chans = (uc, 1.0 - uc, uc ** 2, np.sqrt(uc))
    out = np.zeros((4,) + u.shape)
    for i, c in enumerate(chans):
        x = c + noise * rng.standard_normal(u.shape)
        out[i] = zscore_nonzero(np.where(mask, x, 0.0))
    return out


def case_from_density(u, mask, thresholds=DEFAULT_THRESHOLDS, noise=0.1, rng=None, meta=None):
    rng = np.random.default_rng(rng)
    labels = labels_from_density(u, thresholds)
    inputs = pseudo_modalities(u, mask, noise, rng)
    return SynthCase(Field3D(u), inputs, labels, dict(meta or {}))


def _attempt(rng, dims, d_range, rho_range, days_range, thresholds, noise):
    mask = ellipsoid_mask(dims)
    inner = np.argwhere(ellipsoid_mask(dims, [0.25 * n for n in dims]))
    u0 = np.zeros(dims)
    bumps = []
    for _ in range(int(rng.integers(1, 4))):
        centre = inner[rng.integers(len(inner))].astype(float)
        sigma = float(rng.uniform(1.5, 3.0))
        amp = float(rng.uniform(0.6, 1.0))
        u0 += gaussian_bump(dims, centre, sigma, amp)
        bumps.append({"centre": centre.tolist(), "sigma": sigma, "amplitude": amp})
    u0 = np.clip(u0, 0.0, 1.0) * mask

    d = float(rng.uniform(*d_range))
    rho = float(rng.uniform(*rho_range))
    days = float(rng.uniform(*days_range))
    dt = min(0.25, 0.9 / (6.0 * d))
    steps = max(1, int(np.ceil(days / dt)))
    dt = days / steps
    params = GrowthParams(Field3D(d * mask), Field3D(rho * mask), dt, steps)
    u = simulate(Field3D(u0), params).final.data * mask

    meta = {"d": d, "rho": rho, "days": days, "dt": dt, "steps": steps,
            "bumps": bumps, "thresholds": list(thresholds), "noise": noise}
    return case_from_density(u, mask, thresholds, noise, rng, meta)


def generate(seed, dims=(32, 32, 32), d_range=D_RANGE, rho_range=RHO_RANGE,
             thresholds=DEFAULT_THRESHOLDS, noise=0.1, days_range=(10.0, 40.0),
             max_retries=20) -> SynthCase:
    """Deterministic synthetic case for ``seed``; retries on an empty WT region."""
    for attempt in range(max_retries):
        rng = np.random.default_rng([int(seed), attempt])
        try:
            case = _attempt(rng, tuple(dims), d_range, rho_range, days_range, thresholds, noise)
        except EmptyRegionError:
            continue
        case.meta.update(seed=int(seed), attempt=attempt)
        return case
    raise EmptyRegionError(f"seed {seed}: no non-empty case after {max_retries} attempts")


def split_seeds(n_cases: int, ratios=(7, 1, 2), base_seed: int = 0) -> dict[str, list[int]]:
    """Partition consecutive case seeds into train/val/test by ``ratios``."""
    total = sum(ratios)
    n_train = int(round(n_cases * ratios[0] / total))
    n_val = int(round(n_cases * ratios[1] / total))
    seeds = list(range(base_seed, base_seed + n_cases))
    return {"train": seeds[:n_train],
            "val": seeds[n_train:n_train + n_val],
            "test": seeds[n_train + n_val:]}


def drop_channels(inputs: np.ndarray, channels) -> np.ndarray:
    """Zero out the listed input channels (missing-modality analogue)."""
    out = inputs.copy()
    for c in channels or ():
        out[int(c)] = 0.0
    return out
