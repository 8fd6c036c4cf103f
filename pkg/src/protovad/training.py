"""Losses, the optimization step, the epoch loop and checkpoint persistence."""

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .data import DatasetError, stack_windows
from .discloss import discriminative_loss
from .memory import MemoryBank, cosine_affinity, update_memory, update_weights
from .model import ArchConfig, TwoBranchAutoencoder

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
LOG_COLUMNS = ("step", "l_pred", "l_diff", "l_dis", "total", "tr_within", "tr_between", "dead_items")
DETERMINISTIC_ENV = "PROTOVAD_DETERMINISTIC"


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN or infinite objective."""


class CheckpointVersionError(ValueError):
    """Checkpoint was written with an incompatible format version."""


@dataclass
class TrainConfig:
    # clip / architecture
    t: int = 4
    image_size: int = 256
    depth: int = 3
    base_width: int = 64
    feature_dim: int = 512
    n_items: int = 100
    use_memory: bool = True
    use_diff_branch: bool = True
    center_queries: bool = True
    # objective
    lambda_pred: float = 1.0
    lambda_diff: float = 0.1
    lambda_dis: float = 1.0
    eps_dis: float = 1e-8
    # optimization
    learning_rate: float = 2e-4
    batch_size: int = 4
    epochs: int = 10
    max_steps: Optional[int] = None
    stride: int = 1
    seed: int = 0
    deterministic: bool = True
    memory_grad: bool = True
    memory_update: bool = True
    checkpoint_every: int = 1
    # scoring
    gamma: float = 0.6
    normalize_scope: str = "video"

    def __post_init__(self):
        for name in ("lambda_pred", "lambda_diff", "lambda_dis"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0 or self.stride < 1:
            raise ValueError("learning_rate, batch_size, stride must be positive and epochs >= 0")
        if self.normalize_scope not in ("video", "dataset"):
            raise ValueError("normalize_scope must be 'video' or 'dataset'")
        self.arch()  # validates shapes

    @classmethod
    def desk(cls, **overrides):
        """Small profile: 64x64 frames, 10 items, 64-d features."""
        base = dict(image_size=64, n_items=10, feature_dim=64, base_width=16)
        base.update(overrides)
        return cls(**base)

    def arch(self):
        return ArchConfig(
            t=self.t,
            image_size=self.image_size,
            depth=self.depth,
            base_width=self.base_width,
            feature_dim=self.feature_dim,
            n_items=self.n_items,
            use_memory=self.use_memory,
            use_diff_branch=self.use_diff_branch,
            center_queries=self.center_queries,
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# losses


def prediction_loss(pred, target):
    return F.mse_loss(pred, target)


def diff_loss(pred_diff, gt_diff):
    return F.mse_loss(pred_diff, gt_diff)


def total_objective(l_pred, l_diff, l_dis, cfg):
    return cfg.lambda_pred * l_pred + cfg.lambda_diff * l_diff + cfg.lambda_dis * l_dis


# --------------------------------------------------------------------------
# training


def set_determinism(seed, deterministic=True):
    torch.manual_seed(seed)
    if deterministic or os.environ.get(DETERMINISTIC_ENV) == "1":
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False


def build_model(cfg):
    model = TwoBranchAutoencoder(cfg.arch(), memory_seed=cfg.seed)
    if model.memory is not None and not cfg.memory_grad:
        model.memory.requires_grad_(False)
    return model


def build_optimizer(model, cfg):
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=cfg.learning_rate)


def _batch_summary(clips, targets):
    return (
        f"clips mean={clips.mean():.4g} std={clips.std():.4g} min={clips.min():.4g} max={clips.max():.4g}; "
        f"targets mean={targets.mean():.4g} std={targets.std():.4g}"
    )


def train_step(model, optimizer, batch, cfg, step=0):
    """One gradient step followed by the running memory update.

    Parameters
    ----------
    batch : tuple of tensors
        ``(clips (B, t, 3, S, S), targets (B, 3, S, S), diffs (B, t, 3, S, S))``.

    Returns
    -------
    dict with the training-log columns.
    """
    clips, targets, diffs = batch
    model.train()
    out = model(clips)
    l_pred = prediction_loss(out.predicted_frame, targets)
    zero = l_pred.new_zeros(())
    l_diff = diff_loss(out.predicted_diff, diffs) if out.predicted_diff is not None else zero
    flat = out.queries.reshape(-1, out.queries.shape[-1])
    if model.memory is not None:
        l_dis, stats = discriminative_loss(flat, model.memory, eps=cfg.eps_dis, return_stats=True)
        tr_w, tr_b, dead = float(stats.tr_within), float(stats.tr_between), stats.dead_items
    else:
        l_dis, tr_w, tr_b, dead = zero, 0.0, 0.0, 0
    total = total_objective(l_pred, l_diff, l_dis, cfg)
    l_pred_v, l_diff_v, l_dis_v, total_v = (float(x.detach()) for x in (l_pred, l_diff, l_dis, total))
    if not math.isfinite(total_v):
        raise NonFiniteLossError(
            f"non-finite objective at step {step}: l_pred={l_pred_v}, l_diff={l_diff_v}, "
            f"l_dis={l_dis_v}; {_batch_summary(clips, targets)}"
        )
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()

    if model.memory is not None:
        with torch.no_grad():
            if cfg.memory_update:
                severed = flat.detach()
                v = update_weights(cosine_affinity(severed, model.memory))
                model.memory.copy_(update_memory(model.memory, severed, v))
            else:
                model.memory.copy_(F.normalize(model.memory, dim=1))
    return {
        "step": step,
        "l_pred": l_pred_v,
        "l_diff": l_diff_v,
        "l_dis": l_dis_v,
        "total": total_v,
        "tr_within": tr_w,
        "tr_between": tr_b,
        "dead_items": dead,
    }


class TrainingLog:
    """Append-only CSV writer for per-step metrics."""

    def __init__(self, path=None):
        self.path = None if path is None else Path(path)
        self.rows = []
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow(LOG_COLUMNS)

    @staticmethod
    def format_row(rec):
        return [rec["step"]] + [repr(rec[k]) for k in LOG_COLUMNS[1:-1]] + [rec["dead_items"]]

    def append(self, rec):
        self.rows.append(rec)
        if self.path is not None:
            with open(self.path, "a", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow(self.format_row(rec))


class FitResult(NamedTuple):
    model: TwoBranchAutoencoder
    optimizer: torch.optim.Optimizer
    history: list
    checkpoint: Optional[Path]
    step: int
    epoch: int


def _window_index(videos, t, stride):
    index = []
    for v, frames in enumerate(videos):
        if len(frames) < t + 1:
            raise DatasetError(f"training video {v} has {len(frames)} frames; need at least {t + 1}")
        index.extend((v, s) for s in range(0, len(frames) - t, stride))
    return np.asarray(index, dtype=np.int64)


def _as_frame_arrays(dataset):
    videos = []
    for video in dataset:
        frames = getattr(video, "frames", video)
        videos.append(np.asarray(frames, dtype=np.float32))
    return videos


def fit(dataset, cfg: TrainConfig, run_dir=None, resume_from=None, callback=None):
    """Train on normal-only videos.

    Parameters
    ----------
    dataset : iterable of Video or (T, 3, S, S) arrays
    cfg : TrainConfig
    run_dir : path, optional
        Receives ``train_log.csv`` and ``checkpoints/``.
    resume_from : path, optional
        Checkpoint to continue from; the epoch counter and optimizer state are
        restored so the remaining epochs match an uninterrupted run.
    callback : callable, optional
        Called with each metrics record.
    """
    videos = _as_frame_arrays(dataset)
    if not videos:
        raise DatasetError("training dataset is empty")
    for v in videos:
        if v.shape[1:] != (3, cfg.image_size, cfg.image_size):
            raise DatasetError(
                f"training frames have shape {v.shape[1:]}, expected (3, {cfg.image_size}, {cfg.image_size})"
            )
    index = _window_index(videos, cfg.t, cfg.stride)
    if len(index) < cfg.batch_size:
        raise DatasetError(f"only {len(index)} clip windows for batch size {cfg.batch_size}")

    set_determinism(cfg.seed, cfg.deterministic)
    model = build_model(cfg)
    optimizer = build_optimizer(model, cfg)
    step, start_epoch = 0, 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        model.load_state_dict(ckpt["model_state"])
        optimizer.load_state_dict(ckpt["optimizer_state"])
        step, start_epoch = ckpt["step"], ckpt["epoch"]

    run_dir = None if run_dir is None else Path(run_dir)
    log = TrainingLog(None if run_dir is None else run_dir / "train_log.csv")
    last_ckpt = None
    epoch = start_epoch
    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(index))
        n_batches = len(order) // cfg.batch_size
        for b in range(n_batches):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            sel = index[order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            clips, targets, diffs = _gather(videos, sel, cfg.t)
            step += 1
            rec = train_step(model, optimizer, (clips, targets, diffs), cfg, step=step)
            log.append(rec)
            if callback is not None:
                callback(rec)
        logger.info("epoch %d done at step %d", epoch + 1, step)
        if run_dir is not None and ((epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs):
            last_ckpt = save_checkpoint(
                run_dir / "checkpoints" / f"epoch_{epoch + 1:03d}.pt", model, optimizer, cfg, step, epoch + 1
            )
        if cfg.max_steps is not None and step >= cfg.max_steps:
            epoch += 1
            break
    else:
        epoch = max(cfg.epochs, start_epoch)
    model.eval()
    return FitResult(model, optimizer, log.rows, last_ckpt, step, epoch)


def _gather(videos, sel, t):
    clips, targets, diffs = [], [], []
    for v, s in sel:
        c, tg, d = stack_windows(videos[v], [s], t)
        clips.append(c[0])
        targets.append(tg[0])
        diffs.append(d[0])
    return (
        torch.from_numpy(np.stack(clips)),
        torch.from_numpy(np.stack(targets)),
        torch.from_numpy(np.stack(diffs)),
    )


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, optimizer, cfg, step, epoch):
    """Atomically write a single-file checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v for k, v in model.state_dict().items() if k != "memory"}
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "package_version": __version__,
        "arch_config": model.arch.to_dict(),
        "train_config": cfg.to_dict(),
        "model_state": state,
        "memory": None if model.memory is None else MemoryBank(model.memory.detach(), atol=1e-5).state_dict(),
        "optimizer_state": None if optimizer is None else optimizer.state_dict(),
        "step": int(step),
        "epoch": int(epoch),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path):
    """Read a checkpoint and return its payload with ``model_state`` complete.

    Raises
    ------
    CheckpointVersionError
        If the format version is not the one this package writes.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has format version {version!r}; expected {CHECKPOINT_FORMAT_VERSION}"
        )
    state = dict(payload["model_state"])
    if payload["memory"] is not None:
        state["memory"] = MemoryBank.from_state_dict(payload["memory"]).items
    payload["model_state"] = state
    return payload


def model_from_checkpoint(path):
    payload = load_checkpoint(path)
    model = TwoBranchAutoencoder(ArchConfig(**payload["arch_config"]))
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, payload
