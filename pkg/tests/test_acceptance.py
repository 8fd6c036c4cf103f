"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v`` (about 25 minutes
on one CPU core; the trained runs are shared across tests). The summary is
printed at the end of the session under "acceptance criteria".
"""

import time

import numpy as np
import pytest
import torch

import test_memory
from conftest import ACCEPTANCE, ANOMALY_TYPES, VARIANTS, bench_config
from oracles import (
    central_difference,
    cosine_matrix,
    dense_between_scatter,
    dense_loss,
    dense_within_scatter,
    nearest_by_scan,
    pairwise_auc,
    random_gradient_instance,
    rel_error,
)
from protovad.discloss import Assignment, between_scatter_trace, discriminative_loss, within_scatter_trace
from protovad.evaluation import roc_auc
from protovad.scoring import blend_scores, min_max_normalize, score_video
from protovad.training import fit

SEEDS = (0, 1, 2)


def _record(name, passed, detail):
    if not isinstance(passed, str):
        passed = bool(passed)
    ACCEPTANCE[name] = (passed, detail)
    print(f"[{'PASS' if passed is True else 'FAIL' if passed is False else passed}] {name}: {detail}")


def test_full_scale_out_of_scope():
    _record("full-scale benchmark numbers", "N/A",
            "not reproduced: needs licensed datasets and long GPU training; replaced by the desk-scale criteria below")


def test_gradient_correctness():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    n_instances = 20
    for _ in range(n_instances):
        q, m = random_gradient_instance(rng, k=8, n=4, c=6)
        nearest = nearest_by_scan(cosine_matrix(q, m))
        qt = torch.tensor(q, requires_grad=True)
        mt = torch.tensor(m, requires_grad=True)
        discriminative_loss(qt, mt).backward()
        gq = central_difference(lambda x: dense_loss(x, m, nearest), q, h=1e-5)
        gm = central_difference(lambda x: dense_loss(q, x, nearest), m, h=1e-5)
        worst = max(worst, rel_error(qt.grad.numpy(), gq).max(), rel_error(mt.grad.numpy(), gm).max())
    elapsed = time.perf_counter() - t0
    passed = worst < 1e-4 and elapsed < 10
    _record("gradient correctness", passed,
            f"{n_instances} instances, max rel error {worst:.2e} (< 1e-4), {elapsed:.2f}s (< 10s)")
    assert passed


def test_scatter_trace_oracle():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        k, n, c = rng.integers(2, 12), rng.integers(2, 8), rng.integers(1, 10)
        q = rng.standard_normal((k, c)) * rng.uniform(0.1, 5)
        m = rng.standard_normal((n, c))
        m /= np.linalg.norm(m, axis=1, keepdims=True)
        nearest = nearest_by_scan(cosine_matrix(q, m))
        a = Assignment(torch.as_tensor(nearest), torch.bincount(torch.as_tensor(nearest), minlength=n))
        tb = float(between_scatter_trace(torch.tensor(m), a))
        tw = float(within_scatter_trace(torch.tensor(q), torch.tensor(m), a))
        worst = max(worst, abs(tb - np.trace(dense_between_scatter(m, nearest))),
                    abs(tw - np.trace(dense_within_scatter(q, m, nearest))))
    passed = worst <= 1e-9
    _record("scatter-trace oracle", passed, f"100 instances, max abs deviation {worst:.2e} (<= 1e-9)")
    assert passed


def test_memory_algebra_suite():
    props = [
        test_memory.test_stochasticity_and_convex_hull,
        test_memory.test_update_preserves_unit_norm,
        test_memory.test_affinity_scale_invariance,
        test_memory.test_permutation_equivariance,
    ]
    t0 = time.perf_counter()
    failures = []
    for prop in props:
        try:
            prop()
        except Exception as exc:  # report every property, then fail
            failures.append(f"{prop.__name__}: {exc!r}"[:200])
    elapsed = time.perf_counter() - t0
    passed = not failures and elapsed < 30
    _record("memory-algebra property suite", passed,
            f"{len(props)} properties, {len(failures)} failing, {elapsed:.1f}s (< 30s)")
    assert passed, failures


def test_auc_oracle():
    rng = np.random.default_rng(11)
    worst = 0.0
    for i in range(200):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        labels[rng.choice(n, 2, replace=False)] = [0, 1]
        scores = rng.integers(0, 8, n) / 7.0 if i % 2 else rng.standard_normal(n)
        worst = max(worst, abs(roc_auc(scores, labels) - pairwise_auc(scores, labels)))
    passed = worst <= 1e-9
    _record("AUC oracle", passed, f"200 instances (n <= 50, with ties), max deviation {worst:.2e} (<= 1e-9)")
    assert passed


@pytest.mark.slow
def test_scoring_identities(bench):
    run = bench.run("full", 0)
    rng = np.random.default_rng(3)
    in_range, endpoints, affine = True, True, 0.0
    n_videos = 0
    for kind in ANOMALY_TYPES:
        for s in run["series"][kind]:
            n_videos += 1
            in_range &= bool((s.s >= 0).all() and (s.s <= 1).all())
            one = blend_scores(s.video_id, s.psnr, s.dist, 1.0, s.frame_offset)
            zero = blend_scores(s.video_id, s.psnr, s.dist, 0.0, s.frame_offset)
            endpoints &= bool(np.array_equal(one.s, one.p_norm) and np.array_equal(zero.s, 1.0 - zero.d_norm))
            a, b = rng.uniform(0.01, 100), rng.uniform(-100, 100)
            affine = max(affine, np.abs(min_max_normalize(a * s.psnr + b) - s.p_norm).max(),
                         np.abs(min_max_normalize(a * s.dist + b) - s.d_norm).max())
    passed = in_range and endpoints and affine <= 1e-9
    _record("scoring identities", passed,
            f"{n_videos} videos: S in [0,1] {in_range}, gamma endpoints exact {endpoints}, "
            f"affine invariance max dev {affine:.1e} (<= 1e-9)")
    assert passed


@pytest.mark.slow
def test_end_to_end_detection(bench):
    run = bench.run("full", 0)
    elapsed = run["total_seconds"]
    aucs = run["auc"]
    passed = all(v >= 0.85 for v in aucs.values()) and elapsed <= 20 * 60
    detail = ", ".join(f"{k} AUC {v:.4f}" for k, v in aucs.items())
    _record("end-to-end desk-scale detection", passed,
            f"{detail} (>= 0.85); {len(bench.train)} train videos x {len(bench.train[0])} frames, "
            f"{run['cfg'].epochs} epochs, {elapsed / 60:.1f} min (<= 20 min)")
    assert passed


@pytest.mark.slow
def test_discriminative_loss_direction(bench):
    rows, ok = [], True
    for seed in SEEDS:
        on, off = bench.run("full", seed), bench.run("no_dis", seed)
        good = on["d_m"] < off["d_m"] and on["d_q"] > off["d_q"]
        ok &= good
        rows.append(f"seed {seed}: D_m {on['d_m']:.3f} vs {off['d_m']:.3f}, D_q {on['d_q']:.3f} vs {off['d_q']:.3f}")
    _record("discriminative-loss direction (lambda_dis 1 vs 0)", ok, "; ".join(rows))
    assert ok


@pytest.mark.slow
def test_ablation_direction(bench):
    means = {v: float(np.mean([bench.run(v, s)["mean_auc"] for s in SEEDS])) for v in VARIANTS}
    per_seed = {v: [round(bench.run(v, s)["mean_auc"], 4) for s in SEEDS] for v in VARIANTS}
    passed = all(means["full"] >= means[v] for v in VARIANTS if v != "full")
    detail = ", ".join(f"{v} {means[v]:.4f} {per_seed[v]}" for v in VARIANTS)
    _record("ablation direction (full >= each ablation, mean AUC over 3 seeds)", passed, detail)
    assert passed


@pytest.mark.slow
def test_determinism(bench, tmp_path):
    cfg = bench_config("full", 0, epochs=1, max_steps=40)
    videos = [bench.test_set(k)[0] for k in ANOMALY_TYPES]
    logs, scores = [], []
    for name in ("a", "b"):
        result = fit(bench.train, cfg, run_dir=tmp_path / name)
        logs.append((tmp_path / name / "train_log.csv").read_bytes())
        scores.append([score_video(result.model, v, gamma=cfg.gamma).to_csv().encode() for v in videos])
    passed = logs[0] == logs[1] and scores[0] == scores[1]
    _record("determinism", passed,
            f"training log ({len(logs[0])} bytes) and {len(videos)} score CSVs byte-identical: {passed}")
    assert passed


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
