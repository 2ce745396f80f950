"""Per-voxel sine network mapping backbone features and a time value to density.

Each voxel of a (C, H, W, D) feature map becomes one row
``y = (x_1..x_C, t..t)`` of width 2C.  Hidden layers apply
``sin(W y + b)`` and the head is affine, so the density estimate is
unconstrained.  The time derivative is propagated alongside the forward pass
as a tangent, which keeps it on the tape so the PDE residual can be
differentiated with respect to the weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Tensor


@dataclass
class SirenConfig:
    in_channels: int = 1
    hidden: list[int] = field(default_factory=lambda: [32, 32])
    omega0: float = 30.0
    omega: float = 1.0
    activation: str = "sine"  # "relu" only for the activation ablation
    clamp: bool = False

    def __post_init__(self):
        if self.in_channels < 1 or not self.hidden or min(self.hidden) < 1:
            raise ValueError("channel and layer widths must be positive")
        if self.activation not in ("sine", "relu"):
            raise ValueError(f"activation must be 'sine' or 'relu', got {self.activation!r}")

    @property
    def input_width(self) -> int:
        return 2 * self.in_channels

    def widths(self) -> list[int]:
        return [self.input_width, *self.hidden, 1]


@dataclass
class SirenNet:
    layers: list[tuple[np.ndarray, np.ndarray]]
    config: SirenConfig

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"estimator.{i}.weight"] = w
            out[f"estimator.{i}.bias"] = b
        return out

    def load(self, params: dict[str, np.ndarray]):
        for i in range(len(self.layers)):
            self.layers[i] = (params[f"estimator.{i}.weight"], params[f"estimator.{i}.bias"])


def init(config: SirenConfig, seed) -> SirenNet:
    rng = np.random.default_rng(seed)
    widths = config.widths()
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        if i == 0:
            bound = config.omega0 / fan_in
        else:
            bound = np.sqrt(6.0 / fan_in) / config.omega
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append((w, np.zeros(fan_out)))
    return SirenNet(layers, config)


def _flatten(features, cfg):
    x = ad.as_tensor(features)
    if x.ndim != 4 or x.shape[0] != cfg.in_channels:
        raise ShapeError(
            f"expected features of shape (C={cfg.in_channels}, H, W, D), got {x.shape}")
    c, h, w, d = x.shape
    return x.reshape(c, h * w * d).T, (h, w, d)


def _layers(net, params):
    if params is None:
        return [(Tensor(w), Tensor(b)) for w, b in net.layers]
    return params


def evaluate(net: SirenNet, features, t: float, params=None, with_du_dt=True):
    """Density field and optionally its time derivative, both as tensors.

    ``params`` overrides the stored weights with a list of (W, b) tensors,
    typically tape leaves owned by a trainer.
    """
    cfg = net.config
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time value must be in [0, 1], got {t}")
    x, grid = _flatten(features, cfg)
    n = x.shape[0]
    y = ad.concat([x, Tensor(np.full((n, cfg.in_channels), float(t)))], axis=1)
    layers = _layers(net, params)
    # tangent of the input rows: zero on feature columns, one on time columns
    dy = np.concatenate([np.zeros(cfg.in_channels), np.ones(cfg.in_channels)])

    a, da = y, None
    for i, (w, b) in enumerate(layers[:-1]):
        z = ad.affine(a, w, b)
        if with_du_dt:
            # first layer tangent is the same for every row
            dz = (w @ Tensor(dy[:, None])).reshape(1, -1) if i == 0 else da @ w.T
        if cfg.activation == "sine":
            a = ad.sin(z)
            if with_du_dt:
                da = ad.cos(z) * dz
        else:
            a = ad.relu(z)
            if with_du_dt:
                da = ad.step(z) * dz
    w, b = layers[-1]
    u = ad.affine(a, w, b).reshape(grid)
    du = (da @ w.T).reshape(grid) if with_du_dt else None
    if cfg.clamp:
        if du is not None:
            du = du * ad.step(u) * ad.step(1.0 - u)
        u = _clamp01(u)
    return u, du


def _clamp01(u: Tensor) -> Tensor:
    lo = ad.relu(u)
    return lo - ad.relu(lo - 1.0)


def forward(net: SirenNet, features, t: float) -> Tensor:
    u, _ = evaluate(net, features, t, with_du_dt=False)
    return u


def du_dt(net: SirenNet, features, t: float) -> Tensor:
    """Total derivative of the density with respect to the shared time value."""
    _, du = evaluate(net, features, t)
    return du


def leaves(net: SirenNet, tape: Tape) -> list[tuple[Tensor, Tensor]]:
    return [(tape.leaf(w), tape.leaf(b)) for w, b in net.layers]
