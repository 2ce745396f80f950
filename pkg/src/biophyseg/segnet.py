"""Tiny U-shaped 3-D segmentation network built on the tape primitives.

Layout for depth 1 (F = base_features)::

    enc0   conv3 4->F, silu                      full resolution (skip)
    pool   2x average
    enc1   conv3 F->2F, silu                     bottleneck, exposed to the estimator
    up     2x nearest, concat with enc0
    dec0   conv3 3F->F, silu
    head   1x1x1 F->4, softmax over classes
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass
class SegNetConfig:
    in_channels: int = 4
    base_features: int = 8
    depth: int = 1
    classes: int = 4

    def __post_init__(self):
        if min(self.in_channels, self.base_features, self.classes) < 1 or self.depth < 0:
            raise ValueError("SegNetConfig widths must be positive and depth non-negative")

    def width(self, level: int) -> int:
        return self.base_features * 2 ** level

    @property
    def bottleneck_channels(self) -> int:
        return self.width(self.depth)


@dataclass
class SegNet:
    params: dict[str, np.ndarray]
    config: SegNetConfig = field(default_factory=SegNetConfig)


def _conv_init(rng, cout, cin, k=3):
    fan_in = cin * k ** 3
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(cout, cin, k, k, k))


def init(config: SegNetConfig, seed) -> SegNet:
    rng = np.random.default_rng(seed)
    p = {}
    cin = config.in_channels
    for lvl in range(config.depth + 1):
        c = config.width(lvl)
        p[f"enc{lvl}.weight"] = _conv_init(rng, c, cin)
        p[f"enc{lvl}.bias"] = np.zeros(c)
        cin = c
    for lvl in range(config.depth - 1, -1, -1):
        c = config.width(lvl)
        p[f"dec{lvl}.weight"] = _conv_init(rng, c, c + config.width(lvl + 1))
        p[f"dec{lvl}.bias"] = np.zeros(c)
    f = config.base_features
    bound = np.sqrt(6.0 / f)
    p["head.weight"] = rng.uniform(-bound, bound, size=(config.classes, f))
    p["head.bias"] = np.zeros(config.classes)
    return SegNet(p, config)


def forward(net: SegNet, inputs, params: dict[str, Tensor] | None = None):
    """Return ``(probs, features)``.

    ``probs`` is (classes, H, W, D) and sums to one per voxel; ``features`` is
    the bottleneck activation of shape (bottleneck_channels, H/2^depth, ...).
    """
    cfg = net.config
    p = params if params is not None else {k: Tensor(v) for k, v in net.params.items()}
    x = ad.as_tensor(inputs)
    if x.ndim != 4 or x.shape[0] != cfg.in_channels:
        raise ShapeError(f"expected input of shape ({cfg.in_channels}, H, W, D), got {x.shape}")
    div = 2 ** cfg.depth
    if any(n % div for n in x.shape[1:]):
        raise ShapeError(f"spatial extents {x.shape[1:]} must be divisible by {div}")

    skips = []
    for lvl in range(cfg.depth + 1):
        if lvl:
            x = ad.avgpool2(x)
        x = ad.silu(ad.conv3d(x, p[f"enc{lvl}.weight"], p[f"enc{lvl}.bias"]))
        skips.append(x)
    features = x
    for lvl in range(cfg.depth - 1, -1, -1):
        x = ad.concat([skips[lvl], ad.upsample2(x)], axis=0)
        x = ad.silu(ad.conv3d(x, p[f"dec{lvl}.weight"], p[f"dec{lvl}.bias"]))
    c, h, w, d = x.shape
    logits = ad.affine(x.reshape(c, h * w * d).T, p["head.weight"], p["head.bias"])
    probs = ad.softmax(logits.T.reshape(cfg.classes, h, w, d), axis=0)
    return probs, features
