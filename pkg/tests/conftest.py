"""Shared fixtures: the desk-scale synthetic benchmark and a per-session cache of trained runs."""

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from protovad.data import SyntheticSpec, generate_synthetic  # noqa: E402
from protovad.evaluation import memory_spread, pooled_auc, query_proximity  # noqa: E402
from protovad.scoring import score_video  # noqa: E402
from protovad.training import TrainConfig, fit  # noqa: E402

BENCH_EPOCHS = 3
ANOMALY_TYPES = ("fast_motion", "novel_shape")
VARIANTS = {
    "full": {},
    "no_dis": dict(lambda_dis=0.0),
    "no_diff": dict(use_diff_branch=False, lambda_diff=0.0),
    "no_memory": dict(use_memory=False),
}

# criterion name -> (passed, detail); filled by the acceptance tests
ACCEPTANCE = {}


def bench_train_spec():
    return SyntheticSpec(num_videos=8, frames_per_video=150, seed=0, split="train")


def bench_test_spec(anomaly_type):
    return SyntheticSpec(num_videos=4, frames_per_video=120, seed=100, split="test",
                         anomaly_type=anomaly_type, anomaly_window=(50, 85), id_prefix=anomaly_type)


def bench_config(variant="full", seed=0, **kw):
    return TrainConfig.desk(**{"epochs": BENCH_EPOCHS, "seed": seed, **VARIANTS[variant], **kw})


class RunCache:
    def __init__(self):
        self._train = None
        self._tests = {}
        self._runs = {}

    @property
    def train(self):
        if self._train is None:
            self._train = generate_synthetic(bench_train_spec())
        return self._train

    def test_set(self, anomaly_type):
        if anomaly_type not in self._tests:
            self._tests[anomaly_type] = generate_synthetic(bench_test_spec(anomaly_type))
        return self._tests[anomaly_type]

    def run(self, variant="full", seed=0):
        """Train once per (variant, seed) and score both anomaly types."""
        key = (variant, seed)
        if key not in self._runs:
            cfg = bench_config(variant, seed)
            t0 = time.perf_counter()
            result = fit(self.train, cfg)
            train_seconds = time.perf_counter() - t0
            model = result.model
            record = {"cfg": cfg, "model": model, "train_seconds": train_seconds, "auc": {}, "series": {}}
            queries = []
            for kind in ANOMALY_TYPES:
                series = []
                for video in self.test_set(kind):
                    s, out = score_video(model, video, gamma=cfg.gamma, return_outputs=True)
                    series.append(s)
                    queries.append(out["queries"])
                record["series"][kind] = series
                record["auc"][kind] = pooled_auc(series)
            record["mean_auc"] = float(np.mean(list(record["auc"].values())))
            record["total_seconds"] = time.perf_counter() - t0
            if model.memory is not None:
                items = model.memory.detach()
                record["d_m"] = memory_spread(items)
                record["d_q"] = query_proximity(np.concatenate(queries), items)
            self._runs[key] = record
        return self._runs[key]


@pytest.fixture(scope="session")
def bench():
    return RunCache()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (passed, detail) in ACCEPTANCE.items():
        status = "PASS" if passed is True else "FAIL" if passed is False else passed
        terminalreporter.write_line(f"[{status}] {name}: {detail}")
