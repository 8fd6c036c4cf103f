"""scikit-learn style wrapper around training and scoring."""

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_is_fitted

from .evaluation import memory_spread, pooled_auc, query_proximity
from .scoring import score_video
from .training import TrainConfig, fit, model_from_checkpoint, save_checkpoint
from .validation import check_video, check_videos


class PrototypeVAD(OutlierMixin, BaseEstimator):
    """Video anomaly detector with a discriminative prototype memory.

    ``fit`` takes a list of normal training videos, each a ``(T, 3, S, S)``
    array in ``[-1, 1]`` (or a :class:`~protovad.data.Video`). Scores follow
    the scikit-learn outlier convention: ``score_samples`` returns the
    per-frame regularity, so lower means more abnormal.

    Parameters mirror :class:`~protovad.training.TrainConfig`; defaults are
    the full-resolution settings. Use ``PrototypeVAD(**TrainConfig.desk().to_dict())``
    for a CPU-sized model.
    """

    def __init__(
        self,
        t=4,
        image_size=256,
        depth=3,
        base_width=64,
        feature_dim=512,
        n_items=100,
        use_memory=True,
        use_diff_branch=True,
        center_queries=True,
        lambda_pred=1.0,
        lambda_diff=0.1,
        lambda_dis=1.0,
        eps_dis=1e-8,
        learning_rate=2e-4,
        batch_size=4,
        epochs=10,
        max_steps=None,
        stride=1,
        seed=0,
        deterministic=True,
        memory_grad=True,
        memory_update=True,
        checkpoint_every=1,
        gamma=0.6,
        normalize_scope="video",
        threshold=0.5,
    ):
        self.t = t
        self.image_size = image_size
        self.depth = depth
        self.base_width = base_width
        self.feature_dim = feature_dim
        self.n_items = n_items
        self.use_memory = use_memory
        self.use_diff_branch = use_diff_branch
        self.center_queries = center_queries
        self.lambda_pred = lambda_pred
        self.lambda_diff = lambda_diff
        self.lambda_dis = lambda_dis
        self.eps_dis = eps_dis
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.stride = stride
        self.seed = seed
        self.deterministic = deterministic
        self.memory_grad = memory_grad
        self.memory_update = memory_update
        self.checkpoint_every = checkpoint_every
        self.gamma = gamma
        self.normalize_scope = normalize_scope
        self.threshold = threshold

    def _config(self):
        params = self.get_params()
        params.pop("threshold")
        return TrainConfig(**params)

    def fit(self, X, y=None, run_dir=None):
        """Train on normal videos ``X``; ``y`` is ignored."""
        cfg = self._config()
        videos = check_videos(X, cfg.image_size, min_frames=cfg.t + 1)
        result = fit(videos, cfg, run_dir=run_dir)
        self.model_ = result.model
        self.history_ = result.history
        self.n_steps_ = result.step
        return self

    @property
    def memory_items_(self):
        check_is_fitted(self, "model_")
        mem = self.model_.memory
        return None if mem is None else mem.detach().numpy().copy()

    def score_video(self, video):
        """Full :class:`~protovad.scoring.ScoreSeries` for one video."""
        check_is_fitted(self, "model_")
        frames = check_video(video, self.image_size, min_frames=self.t + 1)
        labels = getattr(video, "labels", None)
        series = score_video(self.model_, frames, gamma=self.gamma)
        series.video_id = getattr(video, "video_id", series.video_id)
        series.labels = None if labels is None else np.asarray(labels)[self.t :]
        return series

    def transform(self, X):
        """Raw per-frame ``(psnr, dist)`` features of one video, shape ``(T - t, 2)``."""
        series = self.score_video(X)
        return np.column_stack([series.psnr, series.dist])

    def score_samples(self, X):
        """Regularity score per predictable frame of a single video (length ``T - t``)."""
        return self.score_video(X).s

    def decision_function(self, X):
        return self.score_samples(X) - self.threshold

    def predict(self, X):
        """``-1`` for frames scored below ``threshold``, ``+1`` otherwise."""
        return np.where(self.decision_function(X) < 0, -1, 1)

    def evaluate(self, videos):
        """Pooled frame-level AUC and memory diagnostics on labeled test videos."""
        check_is_fitted(self, "model_")
        series, queries = [], []
        for video in videos:
            frames = check_video(video, self.image_size, min_frames=self.t + 1)
            s, out = score_video(self.model_, frames, gamma=self.gamma, return_outputs=True)
            s.video_id = getattr(video, "video_id", s.video_id)
            s.labels = np.asarray(video.labels)[self.t :]
            series.append(s)
            queries.append(out["queries"])
        report = {"auc": pooled_auc(series)}
        if self.model_.memory is not None:
            items = self.memory_items_
            report["d_m"] = memory_spread(items)
            report["d_q"] = query_proximity(np.concatenate(queries), items)
        return report

    def save(self, path):
        check_is_fitted(self, "model_")
        return save_checkpoint(path, self.model_, None, self._config(), self.n_steps_, self.epochs)

    @classmethod
    def load(cls, path):
        model, payload = model_from_checkpoint(path)
        est = cls(**payload["train_config"])
        est.model_ = model
        est.history_ = []
        est.n_steps_ = payload["step"]
        return est
