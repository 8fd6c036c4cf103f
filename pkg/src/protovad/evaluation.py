"""Frame-level ROC AUC, memory diagnostics and plot artifacts."""

import csv
from pathlib import Path

import numpy as np
import torch
from sklearn.metrics import roc_auc_score

from .memory import cosine_affinity


def roc_auc(scores, labels):
    """Area under the ROC curve of ``scores`` (higher = more anomalous).

    Thin validating wrapper over :func:`sklearn.metrics.roc_auc_score`: the
    curve steps through every distinct threshold and tied scores cross it
    together, so tied positive/negative pairs get half credit.

    Raises
    ------
    ValueError
        If ``labels`` contains only one class or lengths disagree.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D arrays of equal length")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary 0/1")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    return float(roc_auc_score(labels, scores))


def pooled_auc(series_list):
    """AUC over the concatenation of per-video normalized regularity scores."""
    scores, labels = [], []
    for series in series_list:
        if series.labels is None:
            raise ValueError(f"video {series.video_id} has no labels")
        scores.append(1.0 - series.s)
        labels.append(series.labels)
    return roc_auc(np.concatenate(scores), np.concatenate(labels))


def memory_spread(items):
    """Sum over items of the cosine similarity to the mean item (lower = more spread)."""
    items = torch.as_tensor(items, dtype=torch.float64)
    mean = items.mean(dim=0, keepdim=True)
    if float(mean.norm()) < 1e-12:
        raise ValueError("mean memory item is zero: items cancel out, spread is undefined")
    return float(cosine_affinity(items, mean).sum())


def query_proximity(queries, items):
    """Mean cosine similarity between each query and its nearest item."""
    queries = torch.as_tensor(np.asarray(queries), dtype=torch.float64)
    queries = queries.reshape(-1, queries.shape[-1])
    if len(queries) == 0:
        raise ValueError("no queries given")
    d = cosine_affinity(queries, torch.as_tensor(items, dtype=torch.float64))
    return float(d.max(dim=1).values.mean())


def query_proximity_sum(queries, items):
    """``(sum, count)`` form of :func:`query_proximity` for pooling across videos."""
    queries = torch.as_tensor(np.asarray(queries), dtype=torch.float64)
    queries = queries.reshape(-1, queries.shape[-1])
    d = cosine_affinity(queries, torch.as_tensor(items, dtype=torch.float64))
    return float(d.max(dim=1).values.sum()), len(queries)


def pairwise_cosines(items):
    items = torch.as_tensor(items, dtype=torch.float64)
    d = cosine_affinity(items, items)
    iu = torch.triu_indices(len(items), len(items), offset=1)
    return d[iu[0], iu[1]].numpy()


def error_map(target, prediction):
    """Squared error summed over channels, in ``[0, 1]`` intensity space."""
    diff = (np.asarray(target, dtype=np.float64) - np.asarray(prediction, dtype=np.float64)) / 2.0
    return (diff**2).sum(axis=0)


def _write_csv(path, header, rows):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    tmp.replace(path)


def emit_artifacts(series, out_dir, targets=None, predictions=None, diagnostics=None):
    """Write curve, heatmap and diagnostics files for one scored video.

    Parameters
    ----------
    series : ScoreSeries
    out_dir : path
    targets, predictions : (T', 3, S, S) arrays, optional
        Ground-truth and predicted frames aligned with ``series``; when given,
        one error heatmap PNG per frame is written.
    diagnostics : list of dict, optional
        Rows for the diagnostics table (e.g. D_m, D_q with and without the
        discriminative loss).

    Returns
    -------
    dict mapping artifact kind to path(s).
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create artifact directory {out}: {exc}") from exc
    written = {}

    curve_csv = out / f"{series.video_id}_curve.csv"
    _write_csv(curve_csv, ("frame_index", "s"), [(int(i), repr(float(v))) for i, v in zip(series.frame_index, series.s)])
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(series.frame_index, series.s, color="tab:blue", lw=1.2, label="regularity")
    if series.labels is not None and series.labels.any():
        ax.fill_between(series.frame_index, 0, 1, where=series.labels.astype(bool),
                        color="tab:red", alpha=0.15, step="mid", label="anomaly")
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("frame")
    ax.set_ylabel("S(t)")
    ax.set_title(series.video_id)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    curve_png = out / f"{series.video_id}_curve.png"
    fig.savefig(curve_png, dpi=100)
    plt.close(fig)
    written["curve"] = curve_png
    written["curve_csv"] = curve_csv

    if targets is not None and predictions is not None:
        hdir = out / f"{series.video_id}_heatmaps"
        hdir.mkdir(exist_ok=True)
        cmap = plt.get_cmap("jet")
        paths = []
        for idx, tgt, pred in zip(series.frame_index, targets, predictions):
            emap = error_map(tgt, pred)
            scaled = emap / 3.0  # channel-summed error is at most 3
            rgb = (cmap(scaled)[..., :3] * 255).astype(np.uint8)
            p = hdir / f"frame_{int(idx):06d}.png"
            plt.imsave(p, rgb)
            paths.append(p)
        written["heatmaps"] = paths

    if diagnostics:
        keys = list(diagnostics[0])
        diag = out / "diagnostics.csv"
        _write_csv(diag, keys, [[row.get(k) for k in keys] for row in diagnostics])
        written["diagnostics"] = diag
    return written
