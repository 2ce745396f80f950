"""Central-difference gradient suites for every differentiable component."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import estimator as est
from . import losses, segnet
from .autodiff import Tensor, grad_check

TOLERANCE = 1e-5
EPSILON = 1e-5


class ParamPacker:
    """Flatten a dict of arrays into one vector and back into tensors."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.names = sorted(params)
        self.shapes = [params[k].shape for k in self.names]
        self.sizes = [int(np.prod(s)) for s in self.shapes]
        self.vector = np.concatenate([params[k].ravel() for k in self.names])

    def unpack(self, flat: Tensor) -> dict[str, Tensor]:
        out, pos = {}, 0
        for name, shape, n in zip(self.names, self.shapes, self.sizes):
            out[name] = flat[pos:pos + n].reshape(shape)
            pos += n
        return out


def _case(rng, dims=(8, 8, 8)):
    x = rng.standard_normal((4, *dims))
    classes = rng.integers(0, 4, size=dims)
    y = np.stack([(classes == n).astype(float) for n in range(4)])
    return x, y


def _siren_layers(p, n):
    return [(p[f"estimator.{i}.weight"], p[f"estimator.{i}.bias"]) for i in range(n)]


def check_primitives(rng) -> float:
    worst = 0.0
    a = rng.uniform(0.5, 1.5, size=(3, 4))
    b = rng.uniform(0.5, 1.5, size=(3, 4))
    unary = ["neg", "square", "sin", "cos", "exp", "log", "sqrt", "sigmoid", "relu"]
    for kind in unary:
        worst = max(worst, grad_check(lambda x: ad.record(kind, [x]).sum(), a, EPSILON))
    for kind in ["add", "sub", "mul", "div"]:
        worst = max(worst, grad_check(lambda x: ad.record(kind, [x, b]).sum(), a, EPSILON))
        worst = max(worst, grad_check(lambda x: ad.record(kind, [b, x]).sum(), a, EPSILON))
    m = rng.standard_normal((4, 2))
    worst = max(worst, grad_check(lambda x: ad.square(x @ m).sum(), a, EPSILON))
    w, bias = rng.standard_normal((5, 4)), rng.standard_normal(5)
    worst = max(worst, grad_check(lambda x: ad.sin(ad.affine(x, w, bias)).sum(), a, EPSILON))
    worst = max(worst, grad_check(lambda x: ad.square(x).mean(), a, EPSILON))
    worst = max(worst, grad_check(lambda x: (ad.softmax(x, axis=0) * b).sum(), a, EPSILON))
    vol = rng.standard_normal((2, 4, 4, 4))
    k = rng.standard_normal((3, 2, 3, 3, 3))
    for boundary in ad.BOUNDARIES:
        worst = max(worst, grad_check(
            lambda x: ad.square(ad.conv3d(x, k, boundary=boundary)).mean(), vol, EPSILON))
    worst = max(worst, grad_check(
        lambda x: ad.square(ad.upsample2(ad.avgpool2(x))).mean(), vol, EPSILON))
    return worst


def check_estimator(rng, activation="sine") -> float:
    """Gradient of a loss built from both the density and its time derivative."""
    cfg = est.SirenConfig(in_channels=3, hidden=[8, 8], activation=activation)
    net = est.init(cfg, rng.integers(2 ** 31))
    feats = rng.standard_normal((3, 3, 3, 3)) * 0.3
    packer = ParamPacker(net.parameters())
    n = len(net.layers)

    def f(flat):
        p = packer.unpack(flat)
        u, du = est.evaluate(net, feats, 0.4, params=_siren_layers(p, n))
        return (ad.square(u) + ad.square(du)).mean()

    return grad_check(f, packer.vector, EPSILON)


def check_segnet(rng) -> float:
    """Dice loss through the backbone on an 8^3 input."""
    cfg = segnet.SegNetConfig(base_features=2)
    net = segnet.init(cfg, rng.integers(2 ** 31))
    x, y = _case(rng)
    packer = ParamPacker(net.params)
    return grad_check(lambda flat: losses.dice_loss(segnet.forward(net, x, packer.unpack(flat))[0], y),
                      packer.vector, EPSILON)


def check_losses(rng) -> dict[str, float]:
    dims = (4, 4, 4)
    coeffs = losses.sample_coefficients(dims, rng)
    u = rng.uniform(0, 1, size=dims)
    du = rng.standard_normal(dims)
    probs = rng.dirichlet(np.ones(4), size=dims).transpose(3, 0, 1, 2)
    labels = np.stack([(np.argmax(probs, axis=0) == n).astype(float) for n in range(4)])
    return {
        "dice_loss": grad_check(lambda p: losses.dice_loss(p, labels), probs, EPSILON),
        "pde_loss[u]": grad_check(lambda v: losses.pde_loss(v, du, coeffs), u, EPSILON),
        "pde_loss[du_dt]": grad_check(lambda v: losses.pde_loss(u, v, coeffs), du, EPSILON),
        "bc_loss": grad_check(lambda v: losses.bc_loss(v, coeffs), u, EPSILON),
    }


def check_composite(rng, activation="sine", lambdas=(1.0, 1.0)) -> float:
    """Total loss w.r.t. every backbone and estimator parameter on an 8^3 batch."""
    seg_cfg = segnet.SegNetConfig(base_features=2)
    seg = segnet.init(seg_cfg, rng.integers(2 ** 31))
    siren_cfg = est.SirenConfig(in_channels=seg_cfg.bottleneck_channels, hidden=[8, 8],
                                activation=activation)
    siren = est.init(siren_cfg, rng.integers(2 ** 31))
    x, y = _case(rng)
    coeffs = losses.sample_coefficients((4, 4, 4), rng)
    params = {f"seg.{k}": v for k, v in seg.params.items()}
    params.update(siren.parameters())
    packer = ParamPacker(params)
    n = len(siren.layers)
    weights = losses.LossWeights(*lambdas)

    def f(flat):
        p = packer.unpack(flat)
        probs, feats = segnet.forward(seg, x, {k[4:]: v for k, v in p.items() if k.startswith("seg.")})
        u, du = est.evaluate(siren, feats, 0.25, params=_siren_layers(p, n))
        return losses.total_loss(losses.dice_loss(probs, y), losses.pde_loss(u, du, coeffs),
                                 losses.bc_loss(u, coeffs), weights)

    return grad_check(f, packer.vector, EPSILON)


def run_suite(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    results = {"primitives": check_primitives(rng),
               "estimator": check_estimator(rng),
               "seg_model": check_segnet(rng)}
    results.update(check_losses(rng))
    results["composite"] = check_composite(rng)
    return results
