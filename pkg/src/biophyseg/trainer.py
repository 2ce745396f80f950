"""Training loop wiring the backbone, the density estimator and the losses."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import estimator as est
from . import losses, metrics, segnet, synth, volio
from .fields import Field3D

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "t", "lr", "dice", "pde", "bc", "total")


class TrainingDiverged(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    steps: int = 300
    lr0: float = 3e-4
    seed: int = 0
    lambda1: float = 1.0
    lambda2: float = 1.0
    use_pde: bool = True
    use_bc: bool = True
    activation: str = "sine"
    drop_channels: list[int] = field(default_factory=list)
    base_features: int = 8
    depth: int = 1
    hidden: list[int] = field(default_factory=lambda: [32, 32])
    omega0: float = 30.0
    omega: float = 1.0
    clamp: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dataset: str | None = None
    train_size: int | None = None
    split_ratios: list[int] = field(default_factory=lambda: [7, 1, 2])
    # reserved: augmentation, test-time augmentation, sliding windows, early stopping
    augment: bool = False
    early_stopping: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.activation not in ("sine", "relu"):
            raise ValueError(f"activation must be sine or relu, got {self.activation!r}")
        if self.augment or self.early_stopping:
            raise NotImplementedError("augmentation and early stopping are reserved flags")
        losses.LossWeights(self.lambda1, self.lambda2)

    @property
    def weights(self) -> losses.LossWeights:
        return losses.LossWeights(self.lambda1, self.lambda2)

    @property
    def dice_only(self) -> bool:
        return not (self.use_pde or self.use_bc)

    def seg_config(self) -> segnet.SegNetConfig:
        return segnet.SegNetConfig(base_features=self.base_features, depth=self.depth)

    def siren_config(self) -> est.SirenConfig:
        return est.SirenConfig(in_channels=self.seg_config().bottleneck_channels,
                               hidden=list(self.hidden), omega0=self.omega0, omega=self.omega,
                               activation=self.activation, clamp=self.clamp)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def lr_at(step: int, steps: int, lr0: float) -> float:
    """Cosine decay from lr0 at step 0 to 0 at ``steps``."""
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / steps))


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    moments: dict[str, np.ndarray]
    step: int
    config: TrainConfig

    def save(self, path):
        tensors = dict(self.params)
        tensors.update({f"adam.{k}": v for k, v in self.moments.items()})
        volio.write_tensors(path, tensors, step=self.step, config=json.loads(self.config.to_json()),
                            config_hash=self.config.digest(), format_version=volio.FORMAT_VERSION)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        tensors, header = volio.read_tensors(path)
        moments = {k[5:]: v for k, v in tensors.items() if k.startswith("adam.")}
        params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
        return cls(params, moments, int(header["step"]), TrainConfig.from_dict(header["config"]))

    def models(self):
        cfg = self.config
        seg = segnet.SegNet({k[4:]: v for k, v in self.params.items() if k.startswith("seg.")},
                            cfg.seg_config())
        siren = est.init(cfg.siren_config(), 0)
        siren.load({k: v for k, v in self.params.items() if k.startswith("estimator.")})
        return seg, siren


def init_params(cfg: TrainConfig) -> dict[str, np.ndarray]:
    seg = segnet.init(cfg.seg_config(), [cfg.seed, 1])
    siren = est.init(cfg.siren_config(), [cfg.seed, 2])
    params = {f"seg.{k}": v for k, v in seg.params.items()}
    params.update(siren.parameters())
    return params


class Adam:
    """Adaptive-moment descent with bias correction."""

    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def update(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] = params[k] - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        out["t"] = np.array([float(self.t)])
        return out


def step_losses(params_t: dict[str, ad.Tensor], cfg: TrainConfig, case_inputs, case_labels,
                t: float, coeffs: losses.BiophysCoefficients | None, seg_cfg=None, siren_cfg=None):
    """Forward pass of one optimisation step; returns (total, dice, pde, bc) tensors."""
    seg_cfg = seg_cfg or cfg.seg_config()
    net = segnet.SegNet({}, seg_cfg)
    seg_p = {k[4:]: v for k, v in params_t.items() if k.startswith("seg.")}
    probs, feats = segnet.forward(net, case_inputs, seg_p)
    dice = losses.dice_loss(probs, case_labels)
    if cfg.dice_only:
        return dice, dice, None, None
    siren_cfg = siren_cfg or cfg.siren_config()
    n_layers = len(siren_cfg.widths()) - 1
    layers = [(params_t[f"estimator.{i}.weight"], params_t[f"estimator.{i}.bias"])
              for i in range(n_layers)]
    u_hat, du = est.evaluate(est.SirenNet([], siren_cfg), feats, t, params=layers)
    pde = losses.pde_loss(u_hat, du, coeffs) if cfg.use_pde else ad.Tensor(0.0)
    bc = losses.bc_loss(u_hat, coeffs) if cfg.use_bc else ad.Tensor(0.0)
    w1 = cfg.lambda1 if cfg.use_pde else 0.0
    w2 = cfg.lambda2 if cfg.use_bc else 0.0
    total = losses.total_loss(dice, pde, bc, losses.LossWeights(w1, w2))
    return total, dice, pde, bc


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    rows: list[dict]
    trajectory: list[dict[str, np.ndarray]] | None = None

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for r in self.rows:
            w.writerow([r["step"]] + [repr(float(r[c])) for c in LOSS_COLUMNS[1:]])
        return buf.getvalue()


def train(cfg: TrainConfig, cases: list[synth.SynthCase], keep_trajectory=False) -> TrainResult:
    """Optimise the composite objective for ``cfg.steps`` single-case steps."""
    if not cases:
        raise ValueError("training set is empty")
    params = init_params(cfg)
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    case_rng = np.random.default_rng([cfg.seed, 10])
    coeff_rng = np.random.default_rng([cfg.seed, 11])
    seg_cfg, siren_cfg = cfg.seg_config(), cfg.siren_config()
    inputs = [synth.drop_channels(c.inputs, cfg.drop_channels) for c in cases]
    rows, traj = [], [] if keep_trajectory else None

    for n in range(cfg.steps):
        idx = int(case_rng.integers(len(cases)))
        t = n / cfg.steps
        tape = ad.Tape()
        leaves = {k: tape.leaf(v) for k, v in params.items()}
        coeffs = None
        if not cfg.dice_only:
            grid = tuple(s // 2 ** cfg.depth for s in cases[idx].dims)
            coeffs = losses.sample_coefficients(grid, coeff_rng)
        try:
            total, dice, pde, bc = step_losses(leaves, cfg, inputs[idx], cases[idx].labels, t,
                                               coeffs, seg_cfg, siren_cfg)
        except ad.NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite loss at step {n}: {exc}") from exc
        parts = {"dice": dice.item(),
                 "pde": pde.item() if pde is not None else 0.0,
                 "bc": bc.item() if bc is not None else 0.0,
                 "total": total.item()}
        if not all(math.isfinite(v) for v in parts.values()):
            raise TrainingDiverged(f"non-finite loss at step {n}: {parts}")
        adj = ad.backward(tape, total, leaves_only=True)
        grads = {k: adj[v.node] for k, v in leaves.items()}
        lr = lr_at(n, cfg.steps, cfg.lr0)
        opt.update(params, grads, lr)
        rows.append({"step": n, "t": t, "lr": lr, **parts})
        if traj is not None:
            traj.append({k: v.copy() for k, v in params.items()})
        if n % 50 == 0:
            log.debug("step %d total %.6f dice %.6f pde %.6g bc %.6g", n, parts["total"],
                      parts["dice"], parts["pde"], parts["bc"])

    ckpt = Checkpoint(params, opt.state(), cfg.steps, cfg)
    return TrainResult(ckpt, rows, traj)


def predict_classes(seg: segnet.SegNet, inputs) -> np.ndarray:
    probs, _ = segnet.forward(seg, inputs)
    return np.argmax(probs.data, axis=0)


def evaluate(ckpt: Checkpoint, cases: list[synth.SynthCase], case_ids=None,
             predictions: list[np.ndarray] | None = None) -> list[dict]:
    """Per-case Dice/HD95 rows for TC, WT and ET.

    ``predictions`` (class-index maps) bypass the network, e.g. to score an
    oracle.
    """
    if not cases:
        raise ValueError("evaluation split is empty")
    seg = ckpt.models()[0] if ckpt is not None else None
    ids = case_ids if case_ids is not None else list(range(len(cases)))
    rows = []
    for i, (cid, case) in enumerate(zip(ids, cases)):
        if predictions is not None:
            classes = predictions[i]
        else:
            x = synth.drop_channels(case.inputs, ckpt.config.drop_channels)
            classes = predict_classes(seg, x)
        truth = synth.regions_from_classes(np.argmax(case.labels, axis=0))
        rows.extend(metrics.case_rows(cid, synth.regions_from_classes(classes), truth,
                                      case.density.spacing))
    return rows


def mean_dice(rows: list[dict]) -> float:
    """Average of the per-case TC/WT/ET Dice scores."""
    return float(np.mean([r["dice"] for r in rows]))


# dataset on disk -------------------------------------------------------------

def save_case(path, case: synth.SynthCase):
    vol = np.concatenate([case.inputs, case.labels, case.density.data[None]], axis=0)
    names = [f"input:{n}" for n in synth.CHANNEL_NAMES] + \
            [f"label:{n}" for n in synth.CLASS_NAMES] + ["density"]
    volio.write_volume(path, vol, case.density.spacing, channel_names=names, meta=case.meta)


def load_case(path) -> synth.SynthCase:
    vol, header = volio.read_volume(path)
    return synth.SynthCase(Field3D(vol[8], header["spacing"]), vol[:4].copy(), vol[4:8].copy(),
                           header.get("meta", {}))


def build_dataset(out_dir, n_cases: int, base_seed: int = 0, dims=(32, 32, 32),
                  ratios=(7, 1, 2), **gen_kwargs) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = synth.split_seeds(n_cases, ratios, base_seed)
    for name, seeds in splits.items():
        for s in seeds:
            save_case(out / f"case_{s:05d}.bpv", synth.generate(s, dims, **gen_kwargs))
    manifest = {"splits": splits, "dims": list(dims), "ratios": list(ratios)}
    (out / "dataset.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_split(data_dir, split: str, limit: int | None = None):
    root = Path(data_dir)
    manifest = json.loads((root / "dataset.json").read_text())
    seeds = manifest["splits"][split]
    if limit is not None:
        seeds = seeds[:limit]
    return seeds, [load_case(root / f"case_{s:05d}.bpv") for s in seeds]


# ablation sweeps ---------------------------------------------------------------

VARIANTS = {
    "biophys": {},
    "dice_only": {"use_pde": False, "use_bc": False},
    "relu": {"activation": "relu"},
    "no_bc": {"use_bc": False},
}


def run_variant(base: TrainConfig, variant: str, seed: int, train_cases, test_cases) -> float:
    cfg = TrainConfig.from_dict({**asdict(base), **VARIANTS[variant], "seed": seed})
    result = train(cfg, train_cases)
    return mean_dice(evaluate(result.checkpoint, test_cases))


def ablate(base: TrainConfig, pool, test_cases, train_sizes=(2, 4, 8), seeds=range(5),
           activation_size=None, progress=None) -> list[dict]:
    """Sweep of the data-size study and the activation/boundary study.

    Size study: biophys vs dice_only at every train size.  Activation study:
    relu and no_bc variants at ``activation_size`` (smallest size by default),
    compared against the biophys runs from the size study.
    """
    activation_size = activation_size or min(train_sizes)
    rows = []
    jobs = [(n, v) for n in train_sizes for v in ("biophys", "dice_only")]
    jobs += [(activation_size, v) for v in ("relu", "no_bc")]
    for n, variant in jobs:
        for s in seeds:
            score = run_variant(base, variant, s, pool[:n], test_cases)
            rows.append({"train_size": n, "variant": variant, "seed": s, "mean_dice": score})
            if progress:
                progress(rows[-1])
    return rows


def summarise_ablation(rows: list[dict]) -> list[dict]:
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r["train_size"], r["variant"]), []).append(r["mean_dice"])
    return [{"train_size": n, "variant": v, "median_dice": float(np.median(vals)),
             "mean_dice": float(np.mean(vals)), "runs": len(vals)}
            for (n, v), vals in sorted(groups.items())]
