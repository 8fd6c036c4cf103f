"""Video ingestion, clip windowing and a labeled moving-sprite generator.

On-disk layout::

    root/{train,test}/<video_id>/frame_000000.png ...
    root/test/<video_id>.labels        one 0/1 per line
    root/test/<video_id>_mask/         per-frame anomaly masks (PNG)

Frames are held as float32 arrays of shape ``(T, 3, S, S)`` in ``[-1, 1]``.
"""

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class DatasetError(Exception):
    """Raised for missing, unreadable or inconsistent dataset files."""


class ClipSample(NamedTuple):
    frames: np.ndarray  # (t, 3, S, S)
    target: np.ndarray  # (3, S, S)
    diff_gt: np.ndarray  # (t, 3, S, S)
    index: int  # frame index of the target


def to_unit_range(frames):
    """Map ``[-1, 1]`` intensities to ``[0, 1]``."""
    return (np.asarray(frames) + 1.0) / 2.0


def uint8_to_frame(img):
    """``(H, W, 3)`` uint8 image to a ``(3, H, W)`` float32 frame in ``[-1, 1]``."""
    return (np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def frame_to_uint8(frame):
    arr = np.clip(np.rint((np.asarray(frame) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return arr.transpose(1, 2, 0)


def read_frame(path, image_size):
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.size != (image_size, image_size):
                img = img.resize((image_size, image_size), Image.BILINEAR)
            return uint8_to_frame(img)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


class Video:
    """One frame sequence, loaded from disk on first access or held in memory."""

    def __init__(self, video_id, frames=None, paths=None, image_size=None, labels=None, masks=None):
        if frames is None and paths is None:
            raise ValueError("a video needs either frames or frame paths")
        self.video_id = str(video_id)
        self._frames = None if frames is None else np.asarray(frames, dtype=np.float32)
        self.paths = None if paths is None else [Path(p) for p in paths]
        self.image_size = image_size if image_size is not None else self._frames.shape[-1]
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        self.masks = None if masks is None else np.asarray(masks, dtype=bool)
        if self.labels is not None and len(self.labels) != len(self):
            raise DatasetError(
                f"video {self.video_id}: {len(self.labels)} labels for {len(self)} frames"
            )

    def __len__(self):
        return len(self.paths) if self._frames is None else len(self._frames)

    @property
    def frames(self):
        if self._frames is None:
            self._frames = np.stack([read_frame(p, self.image_size) for p in self.paths])
        return self._frames

    def __repr__(self):
        return f"Video({self.video_id!r}, n_frames={len(self)})"


@dataclass
class VideoDataset:
    videos: list
    split: str = "train"
    fps: Optional[float] = None

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")

    def __len__(self):
        return len(self.videos)

    def __iter__(self):
        return iter(self.videos)

    def __getitem__(self, i):
        return self.videos[i]


def _frame_files(folder):
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(root, split="test", image_size=256):
    """Index ``root/<split>`` and return a lazily loaded :class:`VideoDataset`.

    Raises
    ------
    DatasetError
        If the split directory is missing, a video folder is empty, or a
        label file disagrees with its frame count.
    """
    root = Path(root)
    split_dir = root / split
    if not split_dir.is_dir():
        raise DatasetError(f"dataset split directory not found: {split_dir}")
    videos = []
    for folder in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        if folder.name.endswith("_mask"):
            continue
        paths = _frame_files(folder)
        if not paths:
            raise DatasetError(f"no frames found in {folder}")
        labels = None
        label_file = split_dir / f"{folder.name}.labels"
        if label_file.exists():
            try:
                labels = np.loadtxt(label_file, dtype=np.int64, ndmin=1)
            except ValueError as exc:
                raise DatasetError(f"unreadable label file {label_file}: {exc}") from exc
            if len(labels) != len(paths):
                raise DatasetError(
                    f"{label_file}: {len(labels)} labels but {len(paths)} frames in {folder}"
                )
        masks = None
        mask_dir = split_dir / f"{folder.name}_mask"
        if mask_dir.is_dir():
            mask_paths = _frame_files(mask_dir)
            if len(mask_paths) != len(paths):
                raise DatasetError(f"{mask_dir}: {len(mask_paths)} masks for {len(paths)} frames")
            masks = np.stack([_read_mask(p, image_size) for p in mask_paths])
        videos.append(Video(folder.name, paths=paths, image_size=image_size, labels=labels, masks=masks))
    if not videos:
        raise DatasetError(f"no videos found under {split_dir}")
    return VideoDataset(videos, split=split)


def _read_mask(path, image_size):
    with Image.open(path) as img:
        img = img.convert("L")
        if img.size != (image_size, image_size):
            img = img.resize((image_size, image_size), Image.NEAREST)
        return np.asarray(img) > 127


def write_dataset(dataset, root):
    """Write a dataset in the frames-as-images layout under ``root/<split>``."""
    split_dir = Path(root) / dataset.split
    split_dir.mkdir(parents=True, exist_ok=True)
    for video in dataset:
        vdir = split_dir / video.video_id
        vdir.mkdir(exist_ok=True)
        for i, frame in enumerate(video.frames):
            Image.fromarray(frame_to_uint8(frame)).save(vdir / f"frame_{i:06d}.png")
        if video.labels is not None:
            np.savetxt(split_dir / f"{video.video_id}.labels", video.labels, fmt="%d")
        if video.masks is not None:
            mdir = split_dir / f"{video.video_id}_mask"
            mdir.mkdir(exist_ok=True)
            for i, mask in enumerate(video.masks):
                Image.fromarray(mask.astype(np.uint8) * 255).save(mdir / f"frame_{i:06d}.png")
    return split_dir


def n_windows(n_frames, t):
    return max(n_frames - t, 0)


def make_clips(frames, t, stride=1):
    """Yield every ``t``-frame input window with its target and RGB difference.

    ``diff_gt[k] = frames[k] - target`` for each of the ``t`` input frames.
    """
    frames = frames.frames if isinstance(frames, Video) else np.asarray(frames)
    if len(frames) < t + 1:
        raise DatasetError(f"video has {len(frames)} frames; need at least t+1 = {t + 1}")
    for start in range(0, len(frames) - t, stride):
        clip = frames[start : start + t]
        target = frames[start + t]
        yield ClipSample(clip, target, clip - target[None], start + t)


def stack_windows(frames, starts, t):
    """Batch version of :func:`make_clips` for the given window starts."""
    idx = np.asarray(starts)[:, None] + np.arange(t + 1)[None, :]
    win = frames[idx]
    clips, targets = win[:, :t], win[:, t]
    return clips, targets, clips - targets[:, None]


# --------------------------------------------------------------------------
# synthetic moving sprites


@dataclass
class SyntheticSpec:
    num_videos: int = 8
    frames_per_video: int = 150
    sprite_count: int = 2
    normal_speed_range: tuple = (0.5, 1.5)
    anomaly_type: str = "fast_motion"
    anomaly_window: Optional[tuple] = None
    seed: int = 0
    image_size: int = 64
    split: str = "train"
    sprite_size: int = 8
    fast_factor: float = 5.0
    scene_seed: int = 1234
    id_prefix: str = "video"

    def validate(self):
        if self.sprite_count < 1:
            raise ValueError("sprite_count must be >= 1")
        if self.num_videos < 1 or self.frames_per_video < 2:
            raise ValueError("need at least one video of two or more frames")
        lo, hi = self.normal_speed_range
        if not 0 <= lo <= hi:
            raise ValueError(f"invalid normal_speed_range {self.normal_speed_range}")
        if self.anomaly_type not in ("fast_motion", "novel_shape"):
            raise ValueError(f"unknown anomaly_type {self.anomaly_type!r}")
        if self.fast_factor < 4:
            raise ValueError("fast_factor must be at least 4")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        if self.anomaly_window is not None:
            if self.split == "train":
                raise ValueError("the train split cannot contain anomalies")
            start, end = self.anomaly_window
            if not 0 <= start <= end <= self.frames_per_video:
                raise ValueError(
                    f"anomaly_window {self.anomaly_window} outside [0, {self.frames_per_video}]"
                )
        if self.image_size < 4 * self.sprite_size:
            raise ValueError("image_size too small for the sprite size")

    def to_dict(self):
        d = asdict(self)
        d["normal_speed_range"] = list(self.normal_speed_range)
        d["anomaly_window"] = None if self.anomaly_window is None else list(self.anomaly_window)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        if "normal_speed_range" in d:
            d["normal_speed_range"] = tuple(d["normal_speed_range"])
        if d.get("anomaly_window") is not None:
            d["anomaly_window"] = tuple(d["anomaly_window"])
        return cls(**d)


def _background(size, seed):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    bg = np.empty((3, size, size))
    for c in range(3):
        fx, fy = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        bg[c] = 0.25 + 0.1 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase) + 0.05 * xx
    return bg


def _square_coverage(size, cx, cy, half):
    ax = np.arange(size)
    cov_x = np.clip(half + 0.5 - np.abs(ax - cx), 0.0, 1.0)
    cov_y = np.clip(half + 0.5 - np.abs(ax - cy), 0.0, 1.0)
    return cov_y[:, None] * cov_x[None, :]


def _disk_coverage(size, cx, cy, radius):
    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.hypot(xx - cx, yy - cy)
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


class _Sprite:
    def __init__(self, rng, size, margin, speed_range):
        self.pos = rng.uniform(margin, size - 1 - margin, size=2)
        angle = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(*speed_range)
        self.vel = speed * np.array([np.cos(angle), np.sin(angle)])
        self.color = rng.uniform(0.75, 0.95) * np.ones(3)
        self.margin = margin
        self.size = size

    def step(self, factor=1.0):
        self.pos = self.pos + factor * self.vel
        lo, hi = self.margin, self.size - 1 - self.margin
        for k in range(2):
            # reflect off the borders, repeatedly for large steps
            while self.pos[k] < lo or self.pos[k] > hi:
                if self.pos[k] < lo:
                    self.pos[k] = 2 * lo - self.pos[k]
                else:
                    self.pos[k] = 2 * hi - self.pos[k]
                self.vel[k] = -self.vel[k]


_NOVEL_COLOR = np.array([0.95, 0.55, 0.1])


def _render_video(spec, rng, bg):
    size = spec.image_size
    half = spec.sprite_size / 2
    margin = spec.sprite_size
    sprites = [_Sprite(rng, size, margin, spec.normal_speed_range) for _ in range(spec.sprite_count)]
    novel = _Sprite(rng, size, margin, spec.normal_speed_range)
    window = spec.anomaly_window if spec.split == "test" else None
    if window is not None and window[0] == window[1]:
        window = None

    n = spec.frames_per_video
    frames = np.empty((n, 3, size, size))
    labels = np.zeros(n, dtype=np.int64)
    masks = np.zeros((n, size, size), dtype=bool)
    for i in range(n):
        anomalous = window is not None and window[0] <= i < window[1]
        if i > 0:
            for j, s in enumerate(sprites):
                fast = anomalous and spec.anomaly_type == "fast_motion" and j == 0
                s.step(spec.fast_factor if fast else 1.0)
            novel.step()
        img = bg.copy()
        for j, s in enumerate(sprites):
            cov = _square_coverage(size, s.pos[0], s.pos[1], half)
            img = img * (1 - cov) + s.color[:, None, None] * cov
            if anomalous and spec.anomaly_type == "fast_motion" and j == 0:
                masks[i] |= cov > 0.5
        if anomalous and spec.anomaly_type == "novel_shape":
            cov = _disk_coverage(size, novel.pos[0], novel.pos[1], half + 1)
            img = img * (1 - cov) + _NOVEL_COLOR[:, None, None] * cov
            masks[i] |= cov > 0.5
        labels[i] = int(anomalous)
        frames[i] = img
    # quantize to 8-bit levels so a PNG round trip is lossless
    frames = np.rint(np.clip(frames, 0, 1) * 255).astype(np.float32) / 127.5 - 1.0
    return frames.astype(np.float32), labels, masks


def generate_synthetic(spec: SyntheticSpec):
    """Render a labeled moving-sprite dataset, bit-identical for a given spec.

    Normal videos show ``sprite_count`` squares drifting at speeds drawn from
    ``normal_speed_range`` over a fixed background. Inside ``anomaly_window``
    of each test video either the first sprite moves ``fast_factor`` times
    faster (``fast_motion``) or an extra disk of an unseen shape and colour
    crosses the scene (``novel_shape``). Per-pixel masks mark the anomalous
    sprite.
    """
    spec.validate()
    bg = _background(spec.image_size, spec.scene_seed)
    videos = []
    for v in range(spec.num_videos):
        rng = np.random.default_rng([spec.seed, v])
        frames, labels, masks = _render_video(spec, rng, bg)
        is_test = spec.split == "test"
        videos.append(
            Video(
                f"{spec.id_prefix}{v:02d}",
                frames=frames,
                labels=labels if is_test else None,
                masks=masks if is_test else None,
            )
        )
    return VideoDataset(videos, split=spec.split)
