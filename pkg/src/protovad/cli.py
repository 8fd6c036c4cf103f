"""Command-line entry point.

Commands: ``train``, ``score``, ``eval``, ``synth``, ``inspect-memory``.
Diagnostics go to stderr; stdout carries a single JSON summary per command.

Exit codes
----------
0 success, 2 invalid config or spec, 3 dataset error, 4 non-finite loss,
5 checkpoint version mismatch, 6 missing labels.
"""

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .data import DatasetError, SyntheticSpec, generate_synthetic, load_dataset, write_dataset
from .evaluation import emit_artifacts, memory_spread, pairwise_cosines, query_proximity_sum, roc_auc
from .scoring import ScoreSeries, blend_scores, score_video
from .training import (
    DETERMINISTIC_ENV,
    CheckpointVersionError,
    NonFiniteLossError,
    TrainConfig,
    fit,
    model_from_checkpoint,
)

log = logging.getLogger("protovad")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_NAN = 4
EXIT_VERSION = 5
EXIT_LABELS = 6

DATA_KEYS = {"root", "split"}


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# config


def _parse_value(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _flatten(table, prefix=""):
    flat = {}
    for key, value in table.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, prefix=f"{name}."))
        else:
            flat[name] = value
    return flat


def load_config(path=None, overrides=(), profile=None):
    """Read a TOML config plus ``key=value`` overrides.

    Section names are only grouping, except ``[data]`` which holds the
    dataset location. Returns ``(TrainConfig, data_settings)``.
    """
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                raw = _flatten(tomllib.load(f))
        except FileNotFoundError:
            raise CliError(f"config file not found: {path}", EXIT_CONFIG)
        except tomllib.TOMLDecodeError as exc:
            raise CliError(f"cannot parse config {path}: {exc}", EXIT_CONFIG)
    for item in overrides:
        if "=" not in item:
            raise CliError(f"override {item!r} is not of the form key=value", EXIT_CONFIG)
        key, value = item.split("=", 1)
        raw[key.strip()] = _parse_value(value.strip())

    profile = raw.pop("profile", profile)
    fields, data = {}, {}
    for name, value in raw.items():
        parts = name.split(".")
        key = parts[-1]
        if parts[0] == "data" or (len(parts) == 1 and key in DATA_KEYS):
            if key not in DATA_KEYS:
                raise CliError(f"unknown data key {name!r}", EXIT_CONFIG)
            data[key] = value
        else:
            fields[key] = value
    try:
        cfg = TrainConfig.desk(**fields) if profile == "desk" else TrainConfig(**fields)
    except TypeError as exc:
        raise CliError(f"invalid config keys: {exc}", EXIT_CONFIG)
    except ValueError as exc:
        raise CliError(f"invalid config: {exc}", EXIT_CONFIG)
    if profile not in (None, "desk", "full"):
        raise CliError(f"unknown profile {profile!r}", EXIT_CONFIG)
    return cfg, data


# --------------------------------------------------------------------------
# helpers


def _configure_determinism(seed):
    if os.environ.get(DETERMINISTIC_ENV, "1") == "1":
        torch.use_deterministic_algorithms(True)
    if seed is not None:
        torch.manual_seed(seed)


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _append_manifest(run_dir, record):
    """Append one JSON line to the run's manifest; earlier lines are never rewritten."""
    with open(Path(run_dir) / "manifest.jsonl", "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def _write_atomic(path, text):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _emit(summary):
    print(json.dumps(summary, sort_keys=True))


def _load_model(checkpoint):
    try:
        return model_from_checkpoint(checkpoint)
    except CheckpointVersionError as exc:
        raise CliError(str(exc), EXIT_VERSION)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {checkpoint}", EXIT_DATASET)


# --------------------------------------------------------------------------
# commands


def cmd_train(args):
    cfg, data = load_config(args.config, args.override, profile=args.profile)
    if args.seed is not None:
        cfg.seed = args.seed
    _configure_determinism(cfg.seed)
    root = data.get("root")
    if root is None:
        raise CliError("no dataset given: set data.root in the config or pass --override data.root=PATH", EXIT_CONFIG)
    try:
        dataset = load_dataset(root, split=data.get("split", "train"), image_size=cfg.image_size)
    except DatasetError as exc:
        raise CliError(str(exc), EXIT_DATASET)

    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    if (run_dir / "manifest.jsonl").exists():
        raise CliError(f"run directory {run_dir} already holds a run; use a clean directory", EXIT_CONFIG)
    _append_manifest(run_dir, {
        "event": "start",
        "time": _now(),
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "data": {k: str(v) for k, v in data.items()},
        "deterministic": os.environ.get(DETERMINISTIC_ENV, "1") == "1",
    })
    try:
        result = fit(dataset, cfg, run_dir=run_dir, resume_from=args.resume)
    except NonFiniteLossError as exc:
        _append_manifest(run_dir, {"event": "abort", "time": _now(), "reason": str(exc)})
        raise CliError(str(exc), EXIT_NAN)
    except DatasetError as exc:
        raise CliError(str(exc), EXIT_DATASET)
    _append_manifest(run_dir, {
        "event": "end",
        "time": _now(),
        "steps": result.step,
        "checkpoint": str(result.checkpoint),
        "train_log": str(run_dir / "train_log.csv"),
    })
    final = result.history[-1] if result.history else {}
    _emit({"run_dir": str(run_dir), "checkpoint": str(result.checkpoint), "steps": result.step,
           "final_total": final.get("total")})


def cmd_score(args):
    _configure_determinism(args.seed)
    model, payload = _load_model(args.checkpoint)
    cfg = payload["train_config"]
    gamma = cfg["gamma"] if args.gamma is None else args.gamma
    try:
        dataset = load_dataset(args.dataset, split=args.split, image_size=model.arch.image_size)
    except DatasetError as exc:
        raise CliError(str(exc), EXIT_DATASET)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prox_sum, prox_n = 0.0, 0
    files = []
    pooled = []
    for video in dataset:
        try:
            series, outputs = score_video(model, video, gamma=gamma, return_outputs=True)
        except DatasetError as exc:
            raise CliError(str(exc), EXIT_DATASET)
        pooled.append((series, outputs))
        if model.memory is not None:
            s, n = query_proximity_sum(outputs["queries"], model.memory.detach())
            prox_sum, prox_n = prox_sum + s, prox_n + n
    if cfg.get("normalize_scope") == "dataset":
        # one normalization range across every video of the scene
        psnr = np.concatenate([s.psnr for s, _ in pooled])
        dist = np.concatenate([s.dist for s, _ in pooled])
        joint = blend_scores("all", psnr, dist, gamma if model.memory is not None else 1.0, 0)
        lo = 0
        for series, _ in pooled:
            hi = lo + len(series)
            series.p_norm, series.d_norm, series.s = joint.p_norm[lo:hi], joint.d_norm[lo:hi], joint.s[lo:hi]
            lo = hi
    for (series, outputs), video in zip(pooled, dataset):
        path = out / f"{series.video_id}.csv"
        _write_atomic(path, series.to_csv())
        files.append(str(path))
        if args.artifacts:
            t = model.arch.t
            emit_artifacts(series, out / "artifacts", targets=video.frames[t:], predictions=outputs["predictions"])
    summary = {"n_videos": len(files), "files": files, "gamma": gamma}
    if model.memory is not None:
        summary.update(d_m=memory_spread(model.memory.detach()), d_q_sum=prox_sum, d_q_count=prox_n,
                       d_q=prox_sum / max(prox_n, 1))
    _write_atomic(out / "summary.json", json.dumps(summary, sort_keys=True, indent=2))
    _emit(summary)


def _labels_for(series, labels_dir):
    if labels_dir is not None:
        path = Path(labels_dir) / f"{series.video_id}.labels"
        if not path.exists():
            return None
        labels = np.loadtxt(path, dtype=np.int64, ndmin=1)
        idx = series.frame_index
        if idx[-1] >= len(labels):
            raise CliError(f"{path} has {len(labels)} labels; scores reach frame {idx[-1]}", EXIT_LABELS)
        return labels[idx]
    return series.labels


def cmd_eval(args):
    _configure_determinism(args.seed)
    score_dir = Path(args.scores)
    files = sorted(p for p in score_dir.glob("*.csv"))
    if not files:
        raise CliError(f"no score CSV files in {score_dir}", EXIT_DATASET)
    series_list = []
    for path in files:
        series = ScoreSeries.from_csv(path.read_text(), path.stem)
        series.labels = _labels_for(series, args.labels)
        if series.labels is None:
            raise CliError(f"no labels for video {series.video_id}", EXIT_LABELS)
        series_list.append(series)
    scores = np.concatenate([1.0 - s.s for s in series_list])
    labels = np.concatenate([s.labels for s in series_list])
    try:
        auc = roc_auc(scores, labels)
    except ValueError as exc:
        raise CliError(f"cannot compute AUC: {exc}", EXIT_LABELS)
    report = {
        "auc": auc,
        "n_videos": len(series_list),
        "n_frames": int(len(labels)),
        "n_anomalous": int(labels.sum()),
    }
    summary_path = score_dir / "summary.json"
    if summary_path.exists():
        summary = json.loads(summary_path.read_text())
        for key in ("d_m", "d_q"):
            if key in summary:
                report[key] = summary[key]
    out = Path(args.out) if args.out else score_dir
    out.mkdir(parents=True, exist_ok=True)
    lines = ["metric,value"] + [f"{k},{report[k]!r}" for k in sorted(report)]
    _write_atomic(out / "report.csv", "\n".join(lines) + "\n")
    if args.plots:
        for series in series_list:
            emit_artifacts(series, out / "curves")
    _emit(report)


def _read_synth_specs(path):
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except (FileNotFoundError, tomllib.TOMLDecodeError) as exc:
        raise CliError(f"cannot read spec {path}: {exc}", EXIT_CONFIG)
    if raw and all(isinstance(v, dict) for v in raw.values()):
        sections = raw
    else:
        sections = {raw.get("split", "train"): raw}
    specs = []
    for name, table in sections.items():
        table = dict(table)
        table.setdefault("split", "test" if name.startswith("test") else "train")
        try:
            spec = SyntheticSpec.from_dict(table)
            spec.validate()
        except (TypeError, ValueError) as exc:
            raise CliError(f"invalid synthetic spec [{name}]: {exc}", EXIT_CONFIG)
        specs.append(spec)
    return specs


def cmd_synth(args):
    specs = _read_synth_specs(args.spec)
    out = Path(args.out)
    written = []
    for spec in specs:
        if args.seed is not None:
            spec.seed = args.seed
        dataset = generate_synthetic(spec)
        write_dataset(dataset, out)
        written.append({"split": spec.split, "videos": [v.video_id for v in dataset], "spec": spec.to_dict()})
    _write_atomic(out / "synth_spec.json", json.dumps(written, sort_keys=True, indent=2))
    _emit({"root": str(out), "splits": [w["split"] for w in written],
           "n_videos": sum(len(w["videos"]) for w in written)})


def cmd_inspect_memory(args):
    model, payload = _load_model(args.checkpoint)
    if model.memory is None:
        raise CliError("checkpoint has no memory module", EXIT_CONFIG)
    items = model.memory.detach()
    cos = pairwise_cosines(items)
    counts, edges = np.histogram(cos, bins=args.bins, range=(-1.0, 1.0))
    _emit({
        "n_items": int(items.shape[0]),
        "dim": int(items.shape[1]),
        "d_m": memory_spread(items),
        "pairwise_cosine_histogram": {"edges": [float(e) for e in edges], "counts": counts.tolist()},
        "step": payload["step"],
    })


# --------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="protovad", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on normal videos")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--profile", choices=["desk", "full"], default=None)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="write per-video regularity score CSVs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="dataset root")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--gamma", type=float)
    p.add_argument("--artifacts", action="store_true", help="also write curves and error heatmaps")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="frame-level AUC report from score CSVs")
    p.add_argument("--scores", required=True, help="directory of score CSVs")
    p.add_argument("--labels", help="directory of <video_id>.labels files")
    p.add_argument("--out", help="report directory (default: the score directory)")
    p.add_argument("--plots", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    p.add_argument("--spec", required=True, help="TOML synthetic spec")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect-memory", help="summarize a checkpoint's memory bank")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_inspect_memory)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
