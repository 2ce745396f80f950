"""Segmentation objective with biophysical regularisers.

* smoothed multi-class Dice loss
* PDE residual of logistic reaction-diffusion on the estimated density
* zero-flux boundary penalty on the six faces of the feature grid
* their weighted sum
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .fields import Field3D, face_derivatives_tensor, laplacian_tensor

D_RANGE = (0.02, 1.5)
RHO_RANGE = (0.002, 0.2)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class BiophysCoefficients:
    d: Field3D
    rho: Field3D
    d_range: tuple[float, float] = D_RANGE
    rho_range: tuple[float, float] = RHO_RANGE

    @property
    def dims(self):
        return self.d.dims

    @classmethod
    def uniform(cls, dims, d, rho):
        return cls(Field3D.full(dims, d), Field3D.full(dims, rho))


def _data(x):
    if isinstance(x, Field3D):
        return Tensor(x.data)
    return ad.as_tensor(x)


def dice_loss(probs, labels) -> Tensor:
    """Sum over classes of ``1 - (2 sum(y p) + 1) / (sum(y) + sum(p) + 1)``.

    ``probs`` and ``labels`` are (classes, H, W, D); either may be a tensor.
    """
    p, y = ad.as_tensor(probs), ad.as_tensor(labels)
    if p.shape != y.shape:
        raise ShapeError(f"dice_loss: probabilities {p.shape} vs labels {y.shape}")
    axes = tuple(range(1, p.ndim))
    inter = (y * p).sum(axis=axes)
    denom = y.sum(axis=axes) + p.sum(axis=axes) + 1.0
    return (1.0 - (2.0 * inter + 1.0) / denom).sum()


def dice_loss_batch(probs_list, labels_list) -> Tensor:
    """Per-element Dice losses averaged over a batch."""
    terms = [dice_loss(p, y) for p, y in zip(probs_list, labels_list)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / float(len(terms))


def sample_coefficients(dims, rng, d_range=D_RANGE, rho_range=RHO_RANGE) -> BiophysCoefficients:
    """Independent uniform draws of d and rho for every voxel."""
    if not (d_range[0] <= d_range[1] and rho_range[0] <= rho_range[1]):
        raise ValueError("coefficient ranges must be ordered (low, high)")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    d = rng.uniform(d_range[0], d_range[1], size=tuple(dims))
    rho = rng.uniform(rho_range[0], rho_range[1], size=tuple(dims))
    return BiophysCoefficients(Field3D(d), Field3D(rho), tuple(d_range), tuple(rho_range))


def pde_residual(u_hat, du_dt, coeffs: BiophysCoefficients, spacing=1.0) -> Tensor:
    u, du = _data(u_hat), _data(du_dt)
    if not (u.shape == du.shape == coeffs.d.dims == coeffs.rho.dims):
        raise ShapeError(
            f"pde_loss: u_hat {u.shape}, du_dt {du.shape}, coefficients {coeffs.d.dims} must agree")
    lap = laplacian_tensor(u, spacing)
    return du - coeffs.d.data * lap - coeffs.rho.data * u * (1.0 - u)


def pde_loss(u_hat, du_dt, coeffs: BiophysCoefficients, spacing=1.0) -> Tensor:
    """Mean squared residual of du/dt = d lap(u) + rho u (1 - u) over the grid."""
    r = pde_residual(u_hat, du_dt, coeffs, spacing)
    return ad.square(r).mean()


def bc_loss(u_hat, coeffs: BiophysCoefficients, spacing=1.0) -> Tensor:
    """d-weighted squared normal derivatives on the faces, each face area-normalised."""
    u = _data(u_hat)
    if u.shape != coeffs.d.dims:
        raise ShapeError(f"bc_loss: u_hat {u.shape} vs coefficients {coeffs.d.dims}")
    h, w, dd = u.shape
    d = coeffs.d.data
    faces = face_derivatives_tensor(u, spacing)
    d_faces = {"x0": d[0], "x1": d[-1], "y0": d[:, 0], "y1": d[:, -1],
               "z0": d[:, :, 0], "z1": d[:, :, -1]}
    area = {"x": w * dd, "y": h * dd, "z": h * w}
    total = None
    for key, g in faces.items():
        term = (d_faces[key] * ad.square(g)).sum() / float(area[key[0]])
        total = term if total is None else total + term
    return total


def total_loss(dice, pde, bc, weights: LossWeights = LossWeights()) -> Tensor:
    """Dice plus weighted PDE and boundary penalties."""
    for name, v in (("dice", dice), ("pde", pde), ("bc", bc)):
        if not np.all(np.isfinite(ad.as_tensor(v).data)):
            raise ad.NonFiniteError(f"{name} loss is not finite")
    return dice + weights.lambda1 * pde + weights.lambda2 * bc
