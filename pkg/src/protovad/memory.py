"""Prototype memory bank: cosine addressing, read, and the running update.

All functions operate on plain tensors so they compose with autograd. Shapes:
queries are ``(K, C)``, memory items are ``(N, C)``, affinity matrices are
``(K, N)``.
"""

import logging
from typing import NamedTuple

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

QUERY_NORM_FLOOR = 1e-12
MEMORY_FORMAT_VERSION = 1


class AffinityBundle(NamedTuple):
    d: torch.Tensor  # cosine similarities
    w: torch.Tensor  # row-softmax, read weights
    v: torch.Tensor  # column-softmax, update weights


class MemoryBank:
    """An ``(N, C)`` matrix of unit-norm prototype items.

    The bank is treated as an immutable value: :meth:`updated` returns a new
    bank rather than mutating this one.
    """

    def __init__(self, items, atol=1e-6):
        items = torch.as_tensor(items)
        if items.ndim != 2:
            raise ValueError(f"memory items must be 2-D (N, C), got shape {tuple(items.shape)}")
        n, c = items.shape
        if n < 2 or c < 1:
            raise ValueError(f"memory needs N >= 2 and C >= 1, got N={n}, C={c}")
        if not torch.isfinite(items).all():
            raise ValueError("memory items contain non-finite values")
        norms = items.norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=atol, rtol=0):
            raise ValueError(
                f"memory rows must be unit-norm (max deviation {float((norms - 1).abs().max()):.3g})"
            )
        self.items = items

    @classmethod
    def random(cls, n_items, dim, seed=0, dtype=torch.float32):
        return cls(init_memory(n_items, dim, seed=seed, dtype=dtype))

    @property
    def n_items(self):
        return self.items.shape[0]

    @property
    def dim(self):
        return self.items.shape[1]

    def affinity(self, queries):
        d = cosine_affinity(queries, self.items)
        return AffinityBundle(d, read_weights(d), update_weights(d))

    def read(self, queries):
        return transform_queries(read_weights(cosine_affinity(queries, self.items)), self.items)

    def updated(self, queries):
        v = update_weights(cosine_affinity(queries, self.items))
        return MemoryBank(update_memory(self.items, queries, v))

    def state_dict(self):
        return {
            "format_version": MEMORY_FORMAT_VERSION,
            "n_items": self.n_items,
            "dim": self.dim,
            "items": self.items.detach().to(torch.float32).cpu().contiguous(),
        }

    @classmethod
    def from_state_dict(cls, state):
        version = state.get("format_version")
        if version != MEMORY_FORMAT_VERSION:
            raise ValueError(f"unsupported memory format version {version!r}")
        items = state["items"].reshape(state["n_items"], state["dim"])
        # float32 storage: norms are only good to ~1e-7
        return cls(items, atol=1e-5)


def init_memory(n_items, dim, seed=0, dtype=torch.float32):
    """Gaussian rows projected onto the unit sphere, reproducible from ``seed``."""
    gen = torch.Generator().manual_seed(int(seed))
    items = torch.randn(n_items, dim, generator=gen, dtype=torch.float64)
    return F.normalize(items, dim=1).to(dtype)


def cosine_affinity(queries, items):
    """Cosine similarity between every query row and every memory row.

    Raises
    ------
    ValueError
        If the feature dimensions disagree or a query row has (near) zero norm.
    """
    if queries.ndim != 2 or items.ndim != 2:
        raise ValueError("queries and items must both be 2-D")
    if queries.shape[1] != items.shape[1]:
        raise ValueError(
            f"feature dimension mismatch: queries have C={queries.shape[1]}, memory has C={items.shape[1]}"
        )
    q_norm = queries.norm(dim=1, keepdim=True)
    if (q_norm < QUERY_NORM_FLOOR).any():
        bad = torch.nonzero(q_norm.squeeze(1) < QUERY_NORM_FLOOR).flatten().tolist()
        raise ValueError(f"degenerate query rows with zero norm at indices {bad[:10]}")
    m_norm = items.norm(dim=1, keepdim=True)
    d = (queries / q_norm) @ (items / m_norm).T
    return d.clamp(-1.0, 1.0)


def read_weights(d):
    """Softmax over memory items (each row sums to one)."""
    return torch.softmax(d, dim=1)


def update_weights(d):
    """Softmax over queries (each column sums to one)."""
    return torch.softmax(d, dim=0)


def transform_queries(w, items):
    return w @ items


@torch.no_grad()
def update_memory(items, queries, v):
    """Return ``normalize(m_j + sum_i v_ij z_i)`` for every item.

    Rows whose accumulated vector cancels to (near) zero keep their previous
    value. The input tensor is left untouched.
    """
    items = items.detach()
    acc = items + v.detach().T @ queries.detach()
    norms = acc.norm(dim=1, keepdim=True)
    degenerate = norms.squeeze(1) < QUERY_NORM_FLOOR
    out = acc / norms.clamp_min(QUERY_NORM_FLOOR)
    if degenerate.any():
        logger.warning(
            "memory update cancelled to zero for items %s; keeping previous values",
            torch.nonzero(degenerate).flatten().tolist(),
        )
        out[degenerate] = items[degenerate]
    return out
