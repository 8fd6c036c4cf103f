"""Two-branch U-Net autoencoder with a prototype memory at the bottleneck.

The encoder takes ``t`` stacked RGB frames and produces a ``(S/2^L)^2 x C``
grid of query vectors. After the memory read, one decoder predicts the next
frame using the encoder's skip features; the other generates the stacked
RGB difference without any skips, so it cannot copy its input through.
"""

from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .memory import (
    AffinityBundle,
    cosine_affinity,
    init_memory,
    read_weights,
    transform_queries,
    update_weights,
)


@dataclass(frozen=True)
class ArchConfig:
    t: int = 4
    image_size: int = 256
    depth: int = 3
    base_width: int = 64
    feature_dim: int = 512
    n_items: int = 100
    use_memory: bool = True
    use_diff_branch: bool = True
    center_queries: bool = True

    def __post_init__(self):
        if self.t < 1:
            raise ValueError("t must be >= 1")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.image_size % (2**self.depth):
            raise ValueError(
                f"image_size {self.image_size} is not divisible by 2**depth = {2 ** self.depth}"
            )
        if self.use_memory and self.n_items < 2:
            raise ValueError("memory needs at least two items")

    @property
    def feature_size(self):
        return self.image_size // 2**self.depth

    def widths(self):
        return [self.base_width * 2**i for i in range(self.depth)]

    def to_dict(self):
        return asdict(self)


class ForwardOutput(NamedTuple):
    predicted_frame: torch.Tensor  # (B, 3, S, S)
    predicted_diff: Optional[torch.Tensor]  # (B, t, 3, S, S)
    queries: torch.Tensor  # (B, K, C)
    transformed: torch.Tensor  # (B, K, C)
    affinity: Optional[AffinityBundle]  # over the B*K concatenated queries


def _conv_block(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class QueryStandardize(nn.Module):
    """Per-channel standardization without affine terms, scaled by ``1/sqrt(C)``.

    Keeps the query cloud centred on the origin with roughly unit norm, so
    queries and unit-norm memory items live on the same scale.
    """

    def __init__(self, feature_dim):
        super().__init__()
        self.norm = nn.BatchNorm2d(feature_dim, affine=False)
        self.scale = feature_dim**-0.5

    def forward(self, x):
        return self.norm(x) * self.scale


class Encoder(nn.Module):
    def __init__(self, in_channels, widths, feature_dim, center_queries=True):
        super().__init__()
        chans = [in_channels] + list(widths)
        self.levels = nn.ModuleList(_conv_block(a, b) for a, b in zip(chans[:-1], chans[1:]))
        self.bottleneck = nn.Sequential(
            nn.Conv2d(widths[-1], widths[-1], 3, padding=1, bias=False),
            nn.BatchNorm2d(widths[-1]),
            nn.ReLU(inplace=True),
            nn.Conv2d(widths[-1], feature_dim, 3, padding=1),
        )
        if center_queries:
            self.bottleneck.append(QueryStandardize(feature_dim))

    def forward(self, x):
        skips = []
        for level in self.levels:
            x = level(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        return self.bottleneck(x), skips


class Decoder(nn.Module):
    """Mirror of the encoder; ``use_skips`` toggles the U-Net concatenations."""

    def __init__(self, feature_dim, widths, out_channels, use_skips):
        super().__init__()
        self.use_skips = use_skips
        widths = list(widths)[::-1]
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        c_in = feature_dim
        for w in widths:
            self.ups.append(nn.ConvTranspose2d(c_in, w, 2, stride=2))
            self.blocks.append(_conv_block(2 * w if use_skips else w, w))
            c_in = w
        self.head = nn.Conv2d(widths[-1], out_channels, 3, padding=1)

    def forward(self, x, skips=None):
        if self.use_skips and (skips is None or len(skips) != len(self.blocks)):
            raise ValueError("prediction decoder requires one skip feature per level")
        for i, (up, block) in enumerate(zip(self.ups, self.blocks)):
            x = up(x)
            if self.use_skips:
                x = torch.cat([x, skips[-1 - i]], dim=1)
            x = block(x)
        return self.head(x)


class TwoBranchAutoencoder(nn.Module):
    """Encoder, prototype memory, prediction decoder and RGB-difference decoder.

    The memory lives in ``self.memory`` as an ``(N, C)`` parameter so it can
    receive gradients; the non-gradient running update swaps its data in
    place between optimizer steps.
    """

    def __init__(self, arch: ArchConfig, memory_seed=0):
        super().__init__()
        self.arch = arch
        widths = arch.widths()
        self.encoder = Encoder(3 * arch.t, widths, arch.feature_dim, arch.center_queries)
        self.pred_decoder = Decoder(arch.feature_dim, widths, 3, use_skips=True)
        self.diff_decoder = (
            Decoder(arch.feature_dim, widths, 3 * arch.t, use_skips=False)
            if arch.use_diff_branch
            else None
        )
        if arch.use_memory:
            self.memory = nn.Parameter(init_memory(arch.n_items, arch.feature_dim, seed=memory_seed))
        else:
            self.register_parameter("memory", None)

    def encode(self, frames):
        """``(B, t, 3, S, S)`` frames to ``(B, K, C)`` queries plus skip features."""
        b, t, c, h, w = frames.shape
        if t != self.arch.t or c != 3 or h != self.arch.image_size or w != self.arch.image_size:
            raise ValueError(
                f"expected frames of shape (B, {self.arch.t}, 3, {self.arch.image_size}, "
                f"{self.arch.image_size}), got {tuple(frames.shape)}"
            )
        feat, skips = self.encoder(frames.reshape(b, t * c, h, w))
        queries = feat.flatten(2).transpose(1, 2)
        return queries, skips

    def _grid(self, queries):
        b, k, c = queries.shape
        s = self.arch.feature_size
        return queries.transpose(1, 2).reshape(b, c, s, s)

    def decode_prediction(self, transformed, skips):
        return torch.tanh(self.pred_decoder(self._grid(transformed), skips))

    def decode_diff(self, transformed):
        out = 2.0 * torch.tanh(self.diff_decoder(self._grid(transformed)))
        b = out.shape[0]
        s = self.arch.image_size
        return out.reshape(b, self.arch.t, 3, s, s)

    def read_memory(self, queries):
        """Transform ``(B, K, C)`` queries through the memory."""
        b, k, c = queries.shape
        flat = queries.reshape(b * k, c)
        d = cosine_affinity(flat, self.memory)
        w = read_weights(d)
        transformed = transform_queries(w, self.memory).reshape(b, k, c)
        return transformed, AffinityBundle(d, w, update_weights(d))

    def forward(self, frames):
        queries, skips = self.encode(frames)
        if self.memory is not None:
            transformed, affinity = self.read_memory(queries)
        else:
            transformed, affinity = queries, None
        predicted = self.decode_prediction(transformed, skips)
        diff = self.decode_diff(transformed) if self.diff_decoder is not None else None
        return ForwardOutput(predicted, diff, queries, transformed, affinity)
