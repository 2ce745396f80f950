"""Explicit-Euler solver for logistic reaction-diffusion tumour growth.

    du/dt = d * lap(u) + rho * u * (1 - u),   zero normal flux on the box faces

Everything runs in voxel/step units.  :func:`convert_units` maps physical
coefficients (mm^2/day, 1/day) onto the grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError
from .fields import Field3D, laplacian_array


class StabilityError(ValueError):
    pass


@dataclass
class GrowthParams:
    d: Field3D
    rho: Field3D
    dt: float
    steps: int
    snapshot_every: int = 0  # 0 records only the initial and final states

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.steps < 1:
            raise ValueError(f"steps must be positive, got {self.steps}")
        if self.d.dims != self.rho.dims:
            raise ValueError(f"d and rho dims differ: {self.d.dims} vs {self.rho.dims}")
        if (self.d.data < 0).any() or (self.rho.data < 0).any():
            raise ValueError("d and rho must be non-negative")

    @property
    def spacing(self) -> float:
        return self.d.spacing

    @classmethod
    def uniform(cls, dims, d, rho, dt, steps, snapshot_every=0, spacing=1.0):
        return cls(Field3D.full(dims, d, spacing), Field3D.full(dims, rho, spacing),
                   dt, steps, snapshot_every)


@dataclass
class SimResult:
    snapshots: list[tuple[float, Field3D]] = field(default_factory=list)
    final: Field3D | None = None

    def times(self) -> list[float]:
        return [t for t, _ in self.snapshots]


def cfl_bound(params: GrowthParams) -> float:
    """Largest stable explicit time step, h^2 / (6 max d)."""
    dmax = float(params.d.data.max())
    if dmax == 0:
        return math.inf
    return params.spacing ** 2 / (6.0 * dmax)


def check_stability(params: GrowthParams):
    bound = cfl_bound(params)
    if not params.dt < bound:
        raise StabilityError(
            f"dt={params.dt} violates the explicit stability bound dt < {bound:.6g} "
            f"(max d = {params.d.data.max():.6g}, h = {params.spacing})")


def rate(u: np.ndarray, d: np.ndarray, rho: np.ndarray, spacing: float = 1.0) -> np.ndarray:
    """Right-hand side d * lap(u) + rho * u * (1 - u)."""
    return d * laplacian_array(u, spacing) + rho * u * (1.0 - u)


def _step_array(u, params):
    with np.errstate(invalid="ignore", over="ignore"):
        out = u + params.dt * rate(u, params.d.data, params.rho.data, params.spacing)
    if not np.isfinite(out).all():
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(out))[0])
        raise NonFiniteError(f"non-finite density at voxel {bad}")
    return out


def step(u: Field3D, params: GrowthParams) -> Field3D:
    """One forward-Euler update."""
    if u.dims != params.d.dims:
        raise ValueError(f"field dims {u.dims} do not match coefficient dims {params.d.dims}")
    check_stability(params)
    return Field3D(_step_array(u.data, params), u.spacing)


def simulate(u0: Field3D, params: GrowthParams) -> SimResult:
    """Integrate ``params.steps`` Euler steps from ``u0``.

    Snapshots are taken at t=0, every ``snapshot_every`` steps, and at the end.
    """
    if u0.dims != params.d.dims:
        raise ValueError(f"field dims {u0.dims} do not match coefficient dims {params.d.dims}")
    check_stability(params)
    if u0.data.min() < 0 or u0.data.max() > 1:
        raise ValueError("initial density must lie in [0, 1]")
    u = u0.data.copy()
    res = SimResult(snapshots=[(0.0, Field3D(u.copy(), u0.spacing))])
    every = params.snapshot_every
    for n in range(1, params.steps + 1):
        u = _step_array(u, params)
        if (every and n % every == 0) or n == params.steps:
            res.snapshots.append((n * params.dt, Field3D(u.copy(), u0.spacing)))
    res.final = Field3D(u, u0.spacing)
    return res


def convert_units(d_mm2_per_day, rho_per_day, spacing_mm: float, dt_days: float):
    """Physical coefficients to grid units: (d dt / h^2, rho dt) per step."""
    return (np.asarray(d_mm2_per_day) * dt_days / spacing_mm ** 2,
            np.asarray(rho_per_day) * dt_days)


def logistic(u0, rho, t):
    """Closed-form logistic solution, the d = 0 reference."""
    return 1.0 / (1.0 + (1.0 - u0) / u0 * np.exp(-rho * t))


def gaussian_bump(dims, center, sigma, amplitude=1.0) -> np.ndarray:
    grids = np.meshgrid(*(np.arange(n, dtype=float) for n in dims), indexing="ij")
    r2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return amplitude * np.exp(-r2 / (2.0 * sigma ** 2))
