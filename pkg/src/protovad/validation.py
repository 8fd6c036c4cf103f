"""Input checks shared by the estimator and the CLI."""

import numpy as np

from .data import Video


def check_video(video, image_size=None, min_frames=1):
    """Return a ``(T, 3, S, S)`` float32 array in ``[-1, 1]``.

    Accepts a :class:`~protovad.data.Video`, a float array already in the
    model's layout, or a ``(T, S, S, 3)`` uint8 array straight from a decoder.
    """
    frames = video.frames if isinstance(video, Video) else np.asarray(video)
    if frames.ndim != 4:
        raise ValueError(f"expected a 4-D frame array, got shape {frames.shape}")
    if frames.dtype == np.uint8:
        if frames.shape[-1] != 3:
            raise ValueError("uint8 frames must be laid out as (T, H, W, 3)")
        frames = frames.transpose(0, 3, 1, 2).astype(np.float32) / 127.5 - 1.0
    frames = np.asarray(frames, dtype=np.float32)
    if frames.shape[1] != 3:
        raise ValueError(f"expected 3 colour channels on axis 1, got shape {frames.shape}")
    if image_size is not None and frames.shape[2:] != (image_size, image_size):
        raise ValueError(f"frames are {frames.shape[2:]}, expected ({image_size}, {image_size})")
    if not np.isfinite(frames).all():
        raise ValueError("frames contain NaN or Inf")
    if frames.min() < -1.0 - 1e-6 or frames.max() > 1.0 + 1e-6:
        raise ValueError("float frames must be scaled to [-1, 1]")
    if len(frames) < min_frames:
        raise ValueError(f"video has {len(frames)} frames; need at least {min_frames}")
    return frames


def check_videos(videos, image_size=None, min_frames=1):
    if isinstance(videos, np.ndarray) and videos.ndim == 4:
        videos = [videos]
    checked = [check_video(v, image_size, min_frames) for v in videos]
    if not checked:
        raise ValueError("no videos given")
    return checked
