"""Scalar volumes, the 7-point Laplacian stencil and boundary-face derivatives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, conv3d, pad1


def _laplacian_kernel() -> np.ndarray:
    k = np.zeros((3, 3, 3))
    k[1, 1, 1] = -6.0
    for ax in range(3):
        for side in (0, 2):
            idx = [1, 1, 1]
            idx[ax] = side
            k[tuple(idx)] = 1.0
    k.setflags(write=False)
    return k


LAPLACIAN_KERNEL = _laplacian_kernel()

# face order shared by face_derivatives and bc_loss
FACES = ("x0", "x1", "y0", "y1", "z0", "z1")


@dataclass
class Field3D:
    """Scalar field on an H x W x D grid with isotropic spacing ``h``."""

    data: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeError(f"Field3D needs a 3-D array with positive extents, got {self.data.shape}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def full(cls, dims, value, spacing=1.0):
        return cls(np.full(dims, float(value)), spacing)

    def copy(self) -> "Field3D":
        return Field3D(self.data.copy(), self.spacing)


def _check_dims(shape):
    if len(shape) != 3 or min(shape) < 2:
        raise ShapeError(f"every axis needs at least 2 voxels, got {tuple(shape)}")


def _as_array(field):
    if isinstance(field, Field3D):
        return field.data, field.spacing
    return np.asarray(field, dtype=np.float64), 1.0


def laplacian_array(u: np.ndarray, spacing: float = 1.0) -> np.ndarray:
    """Seven-point Laplacian with mirror (zero-flux) boundaries, numpy in/out."""
    _check_dims(u.shape)
    p = pad1(u, "reflect")
    # summed neighbour differences: exact zero on constant fields
    out = ((p[:-2, 1:-1, 1:-1] - u) + (p[2:, 1:-1, 1:-1] - u)
           + (p[1:-1, :-2, 1:-1] - u) + (p[1:-1, 2:, 1:-1] - u)
           + (p[1:-1, 1:-1, :-2] - u) + (p[1:-1, 1:-1, 2:] - u))
    return out / (spacing * spacing)


def laplacian(field: Field3D, boundary: str = "reflect") -> Field3D:
    """Discrete Laplacian of ``field``; out-of-domain neighbours are mirrored."""
    if boundary != "reflect":
        raise ValueError(f"only the reflect boundary is supported, got {boundary!r}")
    u, h = _as_array(field)
    return Field3D(laplacian_array(u, h), h)


def laplacian_tensor(u: Tensor, spacing: float = 1.0) -> Tensor:
    """Recorded Laplacian of a (H, W, D) tensor via the stencil convolution."""
    _check_dims(u.shape)
    w = LAPLACIAN_KERNEL[None, None] / (spacing * spacing)
    return conv3d(u.reshape(1, *u.shape), w, boundary="reflect").reshape(u.shape)


def _face_slices(u, spacing):
    # outward-normal one-sided differences, low face first
    return (
        (u[0] - u[1]) / spacing, (u[-1] - u[-2]) / spacing,
        (u[:, 0] - u[:, 1]) / spacing, (u[:, -1] - u[:, -2]) / spacing,
        (u[:, :, 0] - u[:, :, 1]) / spacing, (u[:, :, -1] - u[:, :, -2]) / spacing,
    )


def face_derivatives(field) -> dict[str, np.ndarray]:
    """One-sided normal derivatives on the six boundary faces.

    Keys follow :data:`FACES`; x-faces have shape (W, D), y-faces (H, D) and
    z-faces (H, W).
    """
    u, h = _as_array(field)
    _check_dims(u.shape)
    return dict(zip(FACES, _face_slices(u, h)))


def face_derivatives_tensor(u: Tensor, spacing: float = 1.0) -> dict[str, Tensor]:
    _check_dims(u.shape)
    return dict(zip(FACES, _face_slices(u, spacing)))
