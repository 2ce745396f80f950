"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``.  The two directional
studies train 40 small models and take roughly a quarter of an hour.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from biophyseg import gradcheck, metrics, synth, trainer
from biophyseg.fields import LAPLACIAN_KERNEL, Field3D, laplacian
from biophyseg.growth import GrowthParams, gaussian_bump, logistic, simulate
from biophyseg.losses import (BiophysCoefficients, bc_loss, dice_loss, pde_loss,
                              sample_coefficients)

# desk-scale protocol shared by both directional studies
DATASET_CASES = 40
TRAIN_SIZES = (2, 4, 8)
SEEDS = range(5)
BASE = trainer.TrainConfig(steps=300, base_features=2, omega0=1.0, lr0=1e-2)


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, detail
    return emit


def test_gradient_correctness(report):
    start = time.perf_counter()
    results = gradcheck.run_suite(0)
    results["composite[relu]"] = gradcheck.check_composite(np.random.default_rng(1), "relu")
    elapsed = time.perf_counter() - start
    worst = max(results, key=results.get)
    report("gradient correctness", results[worst] < 1e-5 and elapsed < 120,
           f"max rel err {results[worst]:.2e} ({worst}), {elapsed:.1f}s")


def test_stencil_identities(report):
    expected = np.zeros((3, 3, 3))
    expected[1, 1, 1] = -6
    for ax in range(3):
        for side in (0, 2):
            idx = [1, 1, 1]
            idx[ax] = side
            expected[tuple(idx)] = 1
    rng = np.random.default_rng(0)
    const = np.abs(laplacian(Field3D.full((6, 7, 8), 2.3)).data).max()
    ramp = np.add.outer(np.add.outer(np.arange(6.0), 2 * np.arange(7.0)), -np.arange(8.0))
    linear = np.abs(laplacian(Field3D(ramp)).data[1:-1, 1:-1, 1:-1]).max()
    u = rng.standard_normal((6, 7, 8))
    divergence = abs(laplacian(Field3D(u)).data.sum()) / (6 * np.abs(u).sum())
    ok = (np.array_equal(LAPLACIAN_KERNEL, expected) and const <= 1e-12 and linear <= 1e-12
          and divergence <= 1e-12)
    report("stencil identities", ok,
           f"kernel exact, constant {const:.1e}, linear {linear:.1e}, global sum {divergence:.1e}")


def test_simulator_physics(report):
    start = time.perf_counter()
    res = simulate(Field3D.full((3, 3, 3), 0.1), GrowthParams.uniform((3, 3, 3), 0.0, 0.2, 1e-3, 10_000))
    logistic_err = np.abs(res.final.data - logistic(0.1, 0.2, 10.0)).max()

    u0 = np.random.default_rng(1).uniform(0, 1, size=(10, 10, 10))
    res = simulate(Field3D(u0), GrowthParams.uniform(u0.shape, 1.5, 0.0, 0.1, 200, snapshot_every=1))
    mass_err = max(abs(f.data.sum() - u0.sum()) / u0.sum() for _, f in res.snapshots)

    res = simulate(Field3D(u0), GrowthParams.uniform(u0.shape, 1.0, 0.2, 0.16, 200, snapshot_every=1))
    lo = min(f.data.min() for _, f in res.snapshots)
    hi = max(f.data.max() for _, f in res.snapshots)

    bump = Field3D(gaussian_bump((16, 16, 16), (7.5, 7.5, 7.5), 2.5, 0.8))
    runs = {k: simulate(bump, GrowthParams.uniform(bump.dims, 0.5, 0.1, 0.04 / k, 250 * k)).final.data
            for k in (1, 2, 4)}
    factor = np.abs(runs[1] - runs[2]).max() / np.abs(runs[2] - runs[4]).max()
    elapsed = time.perf_counter() - start
    ok = (logistic_err < 1e-4 and mass_err < 1e-10 and lo >= -1e-9 and hi <= 1 + 1e-9
          and 1.5 <= factor <= 2.5 and elapsed < 60)
    report("simulator physics", ok,
           f"logistic err {logistic_err:.1e}, mass drift {mass_err:.1e}, range [{lo:.3g}, {hi:.6g}], "
           f"convergence factor {factor:.3f}, {elapsed:.1f}s")


def test_loss_simulator_consistency(report):
    rng = np.random.default_rng(2)
    dims = (12, 12, 12)
    coeffs = sample_coefficients(dims, rng)
    res = simulate(Field3D(gaussian_bump(dims, (5, 6, 7), 2.0, 0.9)),
                   GrowthParams(coeffs.d, coeffs.rho, 0.1, 20, snapshot_every=1))
    worst_pde = max(pde_loss(a, (b.data - a.data) / 0.1, coeffs).item()
                    for (_, a), (_, b) in zip(res.snapshots[:-1], res.snapshots[1:]))

    core = rng.uniform(0, 1, size=(2, 2, 2))
    half = np.pad(core, ((1, 0), (1, 0), (1, 0)), mode="edge")
    sym = np.concatenate([half, half[::-1]], 0)
    sym = np.concatenate([sym, sym[:, ::-1]], 1)
    sym = np.concatenate([sym, sym[:, :, ::-1]], 2)
    bc_sym = bc_loss(sym, sample_coefficients(sym.shape, rng)).item()

    y = np.stack([(rng.integers(0, 4, size=(4, 4, 4)) == k).astype(float) for k in range(4)])
    identity = dice_loss(y, y).item()
    hand = dice_loss(np.array([0.5, 0.5, 0, 0]).reshape(4, 1, 1, 1),
                     np.array([1.0, 0, 0, 0]).reshape(4, 1, 1, 1)).item()
    ramp = np.broadcast_to(np.arange(4.0)[:, None, None], (4, 4, 4))
    bc_ramp = bc_loss(ramp, BiophysCoefficients.uniform((4, 4, 4), 1.0, 0.1)).item()
    pde_hand = pde_loss(np.full((3, 3, 3), 0.5), np.zeros((3, 3, 3)),
                        BiophysCoefficients.uniform((3, 3, 3), 0.4, 0.2)).item()
    ok = (worst_pde < 1e-8 and bc_sym == 0.0 and abs(identity) <= 1e-12
          and abs(hand - (0.2 + 1 / 3)) <= 1e-12 and abs(bc_ramp - 2.0) <= 1e-12
          and abs(pde_hand - 0.0025) <= 1e-12)
    report("loss-simulator consistency", ok,
           f"trajectory pde {worst_pde:.1e}, symmetric bc {bc_sym}, dice identity {identity}, "
           f"dice hand {hand:.15f}, bc ramp {bc_ramp}, pde hand {pde_hand}")


def test_degenerate_weights_equivalence(report):
    cases = [synth.generate(s, dims=(16, 16, 16)) for s in (0, 1)]
    cfg = replace(BASE, steps=25, seed=3)
    zero = trainer.train(replace(cfg, lambda1=0.0, lambda2=0.0), cases, keep_trajectory=True)
    plain = trainer.train(replace(cfg, use_pde=False, use_bc=False), cases, keep_trajectory=True)
    seg_keys = [k for k in zero.checkpoint.params if k.startswith("seg.")]
    same_traj = all(a[k].tobytes() == b[k].tobytes()
                    for a, b in zip(zero.trajectory, plain.trajectory) for k in seg_keys)
    same_dice = [r["dice"] for r in zero.rows] == [r["dice"] for r in plain.rows]
    same_total = [r["total"] for r in zero.rows] == [r["total"] for r in plain.rows]
    report("degenerate-weights equivalence", same_traj and same_dice and same_total,
           f"{len(zero.trajectory)} steps, parameters identical {same_traj}, losses identical "
           f"{same_dice and same_total}")


def brute_hd95(a, b):
    pa, pb = np.argwhere(a).astype(float), np.argwhere(b).astype(float)
    dist = np.sqrt(((pa[:, None] - pb[None]) ** 2).sum(-1))
    return max(metrics.nearest_rank(dist.min(1), 95), metrics.nearest_rank(dist.min(0), 95))


def test_metric_oracle(report):
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(100):
        masks = []
        for _ in range(2):
            m = np.zeros((8, 8, 8), dtype=bool)
            idx = rng.choice(512, size=rng.integers(1, 21), replace=False)
            m.flat[idx] = True
            masks.append(m)
        mismatches += metrics.hd95(*masks) != brute_hd95(*masks)
    a = np.zeros((2, 2, 2), bool)
    a[0, 0, 0] = True
    b = np.zeros((2, 2, 2), bool)
    b[1, 1, 1] = True
    full = np.ones((2, 2, 2), bool)
    hand = (metrics.dice_score(a, a) == 1.0 and metrics.dice_score(a, b) == 0.0
            and metrics.dice_score(a, full) == pytest.approx(2 / 9)
            and metrics.dice_score(~full, ~full) == 1.0 and metrics.hd95(a, b) == pytest.approx(np.sqrt(3)))
    report("metric oracle", mismatches == 0 and hand,
           f"{100 - mismatches}/100 hd95 pairs exact, dice hand cases {'ok' if hand else 'wrong'}")


@pytest.fixture(scope="module")
def ablation():
    split = synth.split_seeds(DATASET_CASES)
    pool = [synth.generate(s) for s in split["train"][:max(TRAIN_SIZES)]]
    test = [synth.generate(s) for s in split["test"]]
    start = time.perf_counter()
    timings = {}

    def tick(row):
        timings[row["variant"]] = time.perf_counter() - start

    rows = trainer.ablate(BASE, pool, test, TRAIN_SIZES, SEEDS, progress=tick)
    scores = {(r["train_size"], r["variant"], r["seed"]): r["mean_dice"] for r in rows}
    # size-study variants run first, so the dice_only stamp closes that study
    return scores, timings["dice_only"], time.perf_counter() - start


def medians(scores, size, variant):
    return float(np.median([scores[size, variant, s] for s in SEEDS]))


def test_training_set_size_direction(report, ablation):
    scores, size_time, _ = ablation
    small, large = min(TRAIN_SIZES), max(TRAIN_SIZES)
    bio, plain = medians(scores, small, "biophys"), medians(scores, small, "dice_only")
    gaps = {n: [scores[n, "biophys", s] - scores[n, "dice_only", s] for s in SEEDS] for n in TRAIN_SIZES}
    wins = sum(g_small >= g_large for g_small, g_large in zip(gaps[small], gaps[large]))
    table = ", ".join(f"n={n}: {medians(scores, n, 'biophys'):.4f}/{medians(scores, n, 'dice_only'):.4f}"
                      for n in TRAIN_SIZES)
    per_seed = "; ".join(f"n={n} gaps " + " ".join(f"{g:+.4f}" for g in gaps[n]) for n in TRAIN_SIZES)
    ok = bio >= plain and wins >= 3 and size_time < 20 * 60
    report("training-set-size direction", ok,
           f"median biophys/dice-only {table}; small-gap >= large-gap in {wins}/5 seeds; "
           f"{per_seed}; {size_time / 60:.1f} min")


def test_activation_and_boundary_direction(report, ablation):
    scores, _, total = ablation
    n = min(TRAIN_SIZES)
    sine, relu = medians(scores, n, "biophys"), medians(scores, n, "relu")
    with_bc, no_bc = sine, medians(scores, n, "no_bc")
    ok = sine >= relu and with_bc >= no_bc - 0.01
    report("activation/boundary direction", ok,
           f"n={n} median sine {sine:.4f} vs relu {relu:.4f}; with bc {with_bc:.4f} vs without "
           f"{no_bc:.4f}; sweep total {total / 60:.1f} min")


def test_determinism(report, tmp_path):
    cases = [synth.generate(s, dims=(16, 16, 16)) for s in (0, 1)]
    cfg = replace(BASE, steps=20, seed=7)
    blobs = []
    for run in ("a", "b"):
        res = trainer.train(cfg, cases)
        res.checkpoint.save(tmp_path / f"{run}.ckpt")
        rows = trainer.evaluate(res.checkpoint, cases)
        metrics.write_csv(tmp_path / f"{run}_metrics.csv", rows)
        (tmp_path / f"{run}_loss.csv").write_text(res.loss_csv())
        blobs.append([(tmp_path / f"{run}{suffix}").read_bytes()
                      for suffix in (".ckpt", "_metrics.csv", "_loss.csv")])
    same = blobs[0] == blobs[1]
    report("determinism", same, f"checkpoint, metrics CSV and loss CSV byte-identical: {same}")
