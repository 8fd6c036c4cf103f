"""Prototype-guided memory autoencoder for unsupervised video anomaly detection."""

__version__ = "0.1.0"

from .data import SyntheticSpec, Video, VideoDataset, generate_synthetic, load_dataset, make_clips
from .discloss import discriminative_loss
from .estimator import PrototypeVAD
from .evaluation import memory_spread, query_proximity, roc_auc
from .memory import MemoryBank
from .model import ArchConfig, TwoBranchAutoencoder
from .scoring import ScoreSeries, score_video
from .training import TrainConfig, fit

__all__ = [
    "ArchConfig",
    "MemoryBank",
    "PrototypeVAD",
    "ScoreSeries",
    "SyntheticSpec",
    "TrainConfig",
    "TwoBranchAutoencoder",
    "Video",
    "VideoDataset",
    "discriminative_loss",
    "fit",
    "generate_synthetic",
    "load_dataset",
    "make_clips",
    "memory_spread",
    "query_proximity",
    "roc_auc",
    "score_video",
]
