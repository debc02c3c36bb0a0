"""Acceptance criteria 1-10.

Each test records one PASS/FAIL line; the lines are printed together in
the terminal summary (see conftest.py).  The benchmark runs are cached
in a module fixture because criteria 1, 2 and 5 share them.
"""
import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from oracles import pairwise_auc, rbdc_oracle, tbdc_oracle
from test_evalmetrics import as_tuples, random_instance
from test_train import TINY, _samples, gradient_check
from stpvad.evalmetrics import (
    GroundTruth, PredictedRegion, Region, macro_auc, micro_auc, rbdc, roc_auc, tbdc,
)
from stpvad.ingest import IngestConfig, build_samples
from stpvad.flow import TableFlowProvider
from stpvad.model import BRANCHES, NetworkConfig, encode, forward, init_network
from stpvad.pipeline import dataset_samples, evaluate_run, run, train_on
from stpvad.score import ScoreConfig, prediction_errors_batch
from stpvad.synthworld import ObjectSpec, SynthConfig, benchmark_configs, generate_scene
from stpvad.train import TrainConfig, context_loss, logistic_loss
from stpvad.types import BoundingBox

pytestmark = pytest.mark.slow

RESULTS: dict[str, str] = {}
DESK_NET = NetworkConfig(base_filters=4)
SEEDS = (0, 1, 2)
VARIANTS = {
    "full": {},
    "no_downscale": {"downscale_ratio": 1.0},
    "appearance_only": {"use_motion_branches": False},
    "motion_only": {"use_appearance_branches": False},
}


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[f"{n:02d}"] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"


@pytest.fixture(scope="module")
def benchmark():
    t0 = time.perf_counter()
    train_cfg, test_cfg = benchmark_configs(seed=0)
    train_ds, test_ds = generate_scene(train_cfg), generate_scene(test_cfg)
    gen_time = time.perf_counter() - t0
    return train_ds, test_ds, gen_time


@pytest.fixture(scope="module")
def runs(benchmark):
    """Every (variant, seed) run on the fixed benchmark, with its wall time."""
    train_ds, test_ds, _ = benchmark
    out = {}
    for variant, kw in VARIANTS.items():
        for seed in SEEDS:
            t0 = time.perf_counter()
            result = run(train_ds, test_ds, DESK_NET, TrainConfig.desk(seed=seed, **kw))
            out[variant, seed] = (result, time.perf_counter() - t0)
    return out


def test_c01_benchmark(benchmark, runs):
    _, test_ds, gen_time = benchmark
    result, elapsed = runs["full", 0]
    r = result.report
    total = gen_time + elapsed
    ok = r.micro_auc >= 0.90 and r.macro_auc >= 0.90 and r.rbdc >= 0.50 and r.tbdc >= 0.60 and total <= 900
    record(1, ok, f"micro {r.micro_auc:.4f}>=0.90 macro {r.macro_auc:.4f}>=0.90 "
                  f"rbdc {r.rbdc:.4f}>=0.50 tbdc {r.tbdc:.4f}>=0.60 runtime {total:.0f}s<=900s")
    assert ok


def test_c01_fast_mover_peak(benchmark, runs):
    """On videos whose only anomaly is a fast mover, the smoothed peak lies inside it."""
    _, test_ds, _ = benchmark
    ckpt = runs["full", 0][0].checkpoint
    cfg = test_ds.config
    fast_only = replace(cfg, anomaly_specs=tuple(a for a in cfg.anomaly_specs if a.type == "fast_mover"))
    ds = generate_scene(fast_only)
    _, _, series = evaluate_run(ckpt, ds)
    for vid, (start, end) in ((v, iv[0]) for v, iv in ds.anomaly_intervals().items()):
        peak = int(np.argmax(series[vid]))
        if not start <= peak <= end:
            RESULTS["01a"] = f"fast-mover peak: FAIL  {vid} peak {peak} outside {start}-{end}"
            pytest.fail(f"{vid}: peak {peak} outside {(start, end)}")
    RESULTS["01a"] = f"fast-mover peak: PASS  smoothed maximum inside the anomaly on all {len(series)} videos"


def _entropy_floor(samples) -> float:
    """Mean per-sample loss of a perfect predictor: the binary entropy of the soft targets."""
    total = 0.0
    for smp in samples:
        for b in BRANCHES:
            x = np.clip(getattr(smp, b).astype(np.float64), 1e-12, 1 - 1e-12)
            total -= float(np.sum(x * np.log(x) + (1 - x) * np.log(1 - x)))
    return total / len(samples)


@pytest.mark.xfail(strict=True, reason="soft targets put the loss floor above half the first epoch")
def test_c01_training_loss_halves(benchmark, runs):
    """Final epoch mean loss below half the first epoch's on the benchmark normal set."""
    train_ds = benchmark[0]
    history = runs["full", 0][0].history
    floor = _entropy_floor(dataset_samples(train_ds, IngestConfig(), 0.5))
    ratio = history.total[-1] / history.total[0]
    RESULTS["01b"] = (f"loss halving (benchmark normal set): FAIL  final/first {ratio:.4f}; "
                      f"entropy floor/first {floor / history.total[0]:.4f} > 0.5, so unreachable")
    assert ratio < 0.5


def test_c01_training_loss_halves_binary_scene(benchmark):
    """The same check on a normal set with background 0 and full-intensity objects."""
    train_cfg = benchmark[0].config
    binary = replace(train_cfg, background_intensity=0.0,
                     object_specs=tuple(replace(o, intensity=1.0) for o in train_cfg.object_specs))
    _, history = train_on(generate_scene(binary), DESK_NET, TrainConfig.desk(seed=0))
    ratio = history.total[-1] / history.total[0]
    RESULTS["01c"] = (f"loss halving (binary-intensity normal set): {'PASS' if ratio < 0.5 else 'FAIL'}  "
                      f"final/first {ratio:.4f} < 0.5")
    assert ratio < 0.5


def test_c02_ablation_direction(runs):
    def mean(variant, metric):
        return float(np.mean([getattr(runs[variant, s][0].report, metric) for s in SEEDS]))

    full_rbdc, nods_rbdc = mean("full", "rbdc"), mean("no_downscale", "rbdc")
    full_micro = mean("full", "micro_auc")
    app, mot = mean("appearance_only", "micro_auc"), mean("motion_only", "micro_auc")
    ok = full_rbdc >= nods_rbdc - 0.02 and full_micro >= app - 0.02 and full_micro >= mot - 0.02
    record(2, ok, f"rbdc full {full_rbdc:.4f} vs no-downscale {nods_rbdc:.4f}; micro full {full_micro:.4f} "
                  f"vs appearance-only {app:.4f}, motion-only {mot:.4f} (slack 0.02, {len(SEEDS)} seeds)")
    assert ok


def test_c03_gradient_check():
    worst = max(gradient_check(init_network(TINY, seed=2), _samples(3)),
                gradient_check(init_network(TINY, seed=5), _samples(2, seed=1), ("M_prev", "M_next")))
    ok = worst < 1e-4
    record(3, ok, f"max relative error {worst:.2e} < 1e-4 (float64, central differences)")
    assert ok


def test_c04_loss_values():
    cases = [
        (logistic_loss([0.5], [1.0]), math.log(2)),
        (logistic_loss(np.full(4096, 0.5), np.full(4096, 0.5)), 4096 * math.log(2)),
        (logistic_loss([0.7], [0.3]), -0.3 * math.log(0.7) - 0.7 * math.log(0.3)),
    ]
    loss_err = max(abs(a - b) for a, b in cases)
    s = _samples(1, 64)[0]
    net = init_network(NetworkConfig(base_filters=2), 0)
    bundle = forward(net, s.Q)
    parts = sum(logistic_loss(bundle.get(b), getattr(s, b)) for b in BRANCHES)
    sum_err = abs(context_loss(bundle, s) - parts)
    ok = loss_err <= 1e-9 and sum_err <= 1e-12 * max(1.0, parts)
    record(4, ok, f"logistic examples max error {loss_err:.1e} <= 1e-9; "
                  f"context = sum of branches, error {sum_err:.1e} (relative tolerance 1e-12)")
    assert ok


def test_c05_normalization(benchmark, runs):
    train_ds, _, _ = benchmark
    ckpt = runs["full", 0][0].checkpoint
    errs = prediction_errors_batch(ckpt.net, dataset_samples(train_ds, ckpt.ingest_config, 0.5))
    z = (errs - ckpt.stats.mu) / ckpt.stats.scale
    mean_dev = float(np.abs(z.mean(axis=0)).max())
    var_dev = float(np.abs(z.var(axis=0, ddof=1) - 1.0).max())
    ok = mean_dev < 1e-9 and var_dev < 1e-9
    record(5, ok, f"training Z-scores |mean| {mean_dev:.1e}, |var-1| {var_dev:.1e} (< 1e-9, {len(errs)} objects)")
    assert ok


def test_c06_auc_oracle():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 201))
        scores = np.round(rng.normal(size=n), 1)  # coarse rounding injects ties
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        worst = max(worst, abs(roc_auc(scores, labels) - pairwise_auc(scores, labels)))
    ok = worst <= 1e-9
    record(6, ok, f"100 instances, max |roc_auc - pairwise| {worst:.1e} <= 1e-9")
    assert ok


def test_c07_detection_oracle():
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(100):
        gt, preds = random_instance(rng)
        p, r = as_tuples(gt, preds)
        mismatches += rbdc(preds, gt) != rbdc_oracle(p, r, gt.total_frames)
        mismatches += tbdc(preds, gt) != tbdc_oracle(p, r, gt.total_frames)
    box = BoundingBox(0, 0, 10, 10)
    gt = GroundTruth({"v": np.array([1, 0])}, [Region("v", 0, box, 1)])
    perfect = [PredictedRegion("v", 0, box, 0.9)]
    miss = [PredictedRegion("v", 0, BoundingBox(20, 20, 30, 30), 0.9)]
    edge = (rbdc(perfect, gt), tbdc(perfect, gt), rbdc(miss, gt), tbdc(miss, gt))
    ok = mismatches == 0 and edge == (1.0, 1.0, 0.0, 0.0)
    record(7, ok, f"100 instances, {mismatches} exact mismatches; perfect/zero cases {edge}")
    assert ok


def test_c08_monotone_invariance():
    rng = np.random.default_rng(8)
    deltas = []
    for _ in range(20):
        gt, preds = random_instance(rng, n_frames=30)
        labels = dict(gt.frame_labels)
        labels["v1"] = np.array([0, 1, 1, 0, 0, 1])
        gt = GroundTruth(labels, gt.regions)
        series = {v: rng.normal(size=len(l)) for v, l in labels.items()}
        moved = {v: np.exp(s) for v, s in series.items()}
        preds_exp = [PredictedRegion(q.video, q.frame, q.box, float(np.exp(q.score))) for q in preds]
        single = {"v1": series["v1"]}
        single_gt = GroundTruth({"v1": labels["v1"]})
        deltas += [
            micro_auc(moved, gt, normalize_per_video=False) - micro_auc(series, gt, normalize_per_video=False),
            micro_auc({"v1": np.exp(series["v1"])}, single_gt) - micro_auc(single, single_gt),
            macro_auc(moved, gt) - macro_auc(series, gt),
            rbdc(preds_exp, gt) - rbdc(preds, gt),
            tbdc(preds_exp, gt) - tbdc(preds, gt),
        ]
    worst = max(abs(d) for d in deltas)
    ok = worst == 0.0
    record(8, ok, f"exp(.) changes micro (concatenated; single video normalized), macro, rbdc, tbdc "
                  f"by at most {worst} over 20 instances")
    assert ok


def test_c09_determinism(tmp_path):
    from test_cli import run as cli_run, sidecar_without_timestamp, tree_bytes

    def pipeline(root):
        assert cli_run("synth", "--preset", "tiny", "--out", root / "data", "--seed", 11) == 0
        assert cli_run("train", "--data", root / "data/train", "--out", root / "run", "--desk", "--seed", 11) == 0
        assert cli_run("score", "--checkpoint", root / "run", "--data", root / "data/test",
                       "--out", root / "scores") == 0
        assert cli_run("eval", "--scores", root / "scores", "--gt", root / "data/test",
                       "--out", root / "scores") == 0

    pipeline(tmp_path / "a")
    pipeline(tmp_path / "b")
    a, b = tmp_path / "a", tmp_path / "b"
    same = {
        "synth": tree_bytes(a / "data") == tree_bytes(b / "data"),
        "train": tree_bytes(a / "run", skip={"checkpoint.json"}) == tree_bytes(b / "run", skip={"checkpoint.json"})
                 and sidecar_without_timestamp(a / "run/checkpoint.json")
                 == sidecar_without_timestamp(b / "run/checkpoint.json"),
        "score": tree_bytes(a / "scores", skip={"report.json"}) == tree_bytes(b / "scores", skip={"report.json"}),
        "eval": (a / "scores/report.json").read_bytes() == (b / "scores/report.json").read_bytes(),
    }
    ok = all(same.values())
    record(9, ok, "byte-identical reruns: " + ", ".join(f"{k} {'yes' if v else 'NO'}" for k, v in same.items()))
    assert ok


def test_c10_shapes_and_range():
    checked = []
    problems = []
    for channels in (1, 3):
        obj = ObjectSpec("disk", 24, (0.9,) * channels if channels == 3 else 0.9, (3, 1), (20, 20))
        cfg = SynthConfig(frame_size=(64, 96), num_videos=1, frames_per_video=4,
                          object_specs=(obj,), channels=channels, seed=1)
        ds = generate_scene(cfg)
        for f0 in (4, 16):
            net = init_network(NetworkConfig(in_channels=channels, base_filters=f0), seed=0)
            for ratio in (1.0, 0.5, 0.25):
                samples = build_samples(ds.all_frames(), ds.detections, TableFlowProvider(ds.flow_fields),
                                        downscale_ratio=ratio)
                q = np.stack([s.Q for s in samples])
                b = forward(net, q)
                z = encode(net, q)
                shapes = {"A_prev": (64, 64, channels), "M_prev": (64, 64, 1),
                          "M_next": (64, 64, 1), "A_next": (64, 64, channels)}
                for name, shape in shapes.items():
                    out = b.get(name)
                    if out.shape != (len(samples),) + shape:
                        problems.append(f"{name} shape {out.shape}")
                    if not (np.all(out > 0) and np.all(out < 1)):
                        problems.append(f"{name} out of (0,1) at c={channels} ratio={ratio}")
                if z.shape != (len(samples), 2, 2, 16 * f0):
                    problems.append(f"latent {z.shape} for f0={f0}")
                checked.append((channels, f0, ratio))
    ok = not problems
    record(10, ok, f"{len(checked)} configs (channels 1/3, f0 4/16, ratios 1, 1/2, 1/4); "
                   + ("all shapes, ranges and latents as declared" if ok else "; ".join(problems[:5])))
    assert ok
