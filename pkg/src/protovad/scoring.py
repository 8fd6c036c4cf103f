"""Per-frame regularity scores for a test video.

Each frame after the first ``t`` is predicted from the preceding window. Its
prediction PSNR and the mean distance from the encoder's queries to their
nearest memory items are min-max normalized over the video and blended::

    S = gamma * P + (1 - gamma) * (1 - D)

Low ``S`` marks an irregular (likely anomalous) frame.
"""

import csv
import io
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .data import DatasetError, Video, stack_windows
from .memory import cosine_affinity, read_weights

MSE_FLOOR = 1e-10
RANGE_FLOOR = 1e-12
SCORE_COLUMNS = ("frame_index", "psnr", "dist", "p_norm", "d_norm", "s", "label")


@dataclass
class ScoreSeries:
    video_id: str
    psnr: np.ndarray
    dist: np.ndarray
    p_norm: np.ndarray
    d_norm: np.ndarray
    s: np.ndarray
    frame_offset: int
    labels: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.s)

    @property
    def frame_index(self):
        return np.arange(self.frame_offset, self.frame_offset + len(self.s))

    def to_csv(self):
        """Render the series as CSV text; float formatting is exact and stable."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SCORE_COLUMNS)
        labels = self.labels if self.labels is not None else np.full(len(self), -1)
        for row in zip(self.frame_index, self.psnr, self.dist, self.p_norm, self.d_norm, self.s, labels):
            writer.writerow([int(row[0])] + [repr(float(x)) for x in row[1:6]] + [int(row[6])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text, video_id):
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows:
            raise ValueError(f"score file for {video_id} is empty")
        col = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
        labels = np.array([int(r["label"]) for r in rows])
        return cls(
            video_id=video_id,
            psnr=col("psnr"),
            dist=col("dist"),
            p_norm=col("p_norm"),
            d_norm=col("d_norm"),
            s=col("s"),
            frame_offset=int(rows[0]["frame_index"]),
            labels=None if (labels < 0).all() else labels,
        )


def frame_mse(a, b):
    """Mean squared error of two ``[-1, 1]`` frames, measured in ``[0, 1]`` space."""
    a = (np.asarray(a, dtype=np.float64) + 1.0) / 2.0
    b = (np.asarray(b, dtype=np.float64) + 1.0) / 2.0
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(mse):
    return 10.0 * np.log10(1.0 / np.maximum(mse, MSE_FLOOR))


def psnr(a, b):
    """Peak signal-to-noise ratio with unit peak; identical frames give 100 dB."""
    return float(psnr_from_mse(frame_mse(a, b)))


def min_max_normalize(series):
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot normalize an empty series")
    lo, hi = x.min(), x.max()
    if hi - lo < RANGE_FLOOR:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def memory_distance(queries, items, w=None):
    """Mean L2 distance from each query to the item with the largest read weight."""
    queries = torch.as_tensor(queries)
    items = torch.as_tensor(items, dtype=queries.dtype)
    if w is None:
        w = read_weights(cosine_affinity(queries, items))
    nearest = torch.as_tensor(w).argmax(dim=1)
    return float((queries - items[nearest]).norm(dim=1).mean())


def regularity_score(p_norm, d_norm, gamma):
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    return gamma * np.asarray(p_norm) + (1.0 - gamma) * (1.0 - np.asarray(d_norm))


def blend_scores(video_id, psnr_values, dist_values, gamma, frame_offset, labels=None):
    p_norm = min_max_normalize(psnr_values)
    d_norm = min_max_normalize(dist_values)
    return ScoreSeries(
        video_id=video_id,
        psnr=np.asarray(psnr_values, dtype=np.float64),
        dist=np.asarray(dist_values, dtype=np.float64),
        p_norm=p_norm,
        d_norm=d_norm,
        s=regularity_score(p_norm, d_norm, gamma),
        frame_offset=frame_offset,
        labels=labels,
    )


@torch.no_grad()
def predict_video(model, frames, batch_size=16):
    """Run the model over every window of a video without touching the memory.

    Returns
    -------
    dict with ``predictions`` (T', 3, S, S), ``psnr`` (T',), ``dist`` (T',),
    and ``queries`` (T', K, C).
    """
    t = model.arch.t
    frames = np.asarray(frames, dtype=np.float32)
    if len(frames) < t + 1:
        raise DatasetError(f"video has {len(frames)} frames; scoring needs at least {t + 1}")
    was_training = model.training
    model.eval()
    starts = np.arange(len(frames) - t)
    preds, psnrs, dists, queries = [], [], [], []
    try:
        for lo in range(0, len(starts), batch_size):
            clips, targets, _ = stack_windows(frames, starts[lo : lo + batch_size], t)
            out = model(torch.from_numpy(clips))
            pred = out.predicted_frame.numpy()
            preds.append(pred)
            err = ((pred.astype(np.float64) - targets) / 2.0) ** 2
            psnrs.append(psnr_from_mse(err.reshape(len(pred), -1).mean(axis=1)))
            if model.memory is not None:
                items = model.memory
                for i, z in enumerate(out.queries):
                    w = out.affinity.w.reshape(len(pred), -1, items.shape[0])[i]
                    dists.append(memory_distance(z, items, w))
            queries.append(out.queries.numpy())
    finally:
        model.train(was_training)
    n = len(starts)
    return {
        "predictions": np.concatenate(preds),
        "psnr": np.concatenate(psnrs),
        "dist": np.asarray(dists) if dists else np.zeros(n),
        "queries": np.concatenate(queries),
    }


def score_video(model, video, gamma=0.6, batch_size=16, return_outputs=False):
    """Score every predictable frame of ``video``.

    Without a memory module the distance term is constant, so the blend
    reduces to the normalized PSNR alone.
    """
    if isinstance(video, Video):
        frames, video_id, labels = video.frames, video.video_id, video.labels
    else:
        frames, video_id, labels = np.asarray(video), "video", None
    t = model.arch.t
    out = predict_video(model, frames, batch_size=batch_size)
    if model.memory is None:
        gamma = 1.0
    series = blend_scores(
        video_id,
        out["psnr"],
        out["dist"],
        gamma,
        frame_offset=t,
        labels=None if labels is None else labels[t:],
    )
    if return_outputs:
        return series, out
    return series
