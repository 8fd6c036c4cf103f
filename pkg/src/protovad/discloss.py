"""Trace-ratio discriminative loss over the memory items.

Queries are grouped by their most similar item. The loss is the ratio of
the within-group scatter (queries around their item) to the between-group
scatter (items around the item mean), both reduced to traces so that no
``C x C`` matrix is ever formed.
"""

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import torch

from .memory import cosine_affinity

DEFAULT_EPS = 1e-8


class MemoryCollapseWarning(RuntimeWarning):
    """All memory items coincide, so the between-item scatter vanishes."""


class Assignment(NamedTuple):
    nearest: torch.Tensor  # (K,) item index per query
    counts: torch.Tensor  # (N,) queries per item


@dataclass
class ScatterStats:
    mean_item: torch.Tensor
    tr_between: torch.Tensor
    tr_within: torch.Tensor
    loss: torch.Tensor
    dead_items: int


def assign_nearest(d):
    """Index of the most similar item for each row of ``d``.

    Ties go to the lowest index.
    """
    d = d.detach()
    n = d.shape[1]
    # argmax on the reversed-priority key gives an explicit lowest-index tie-break
    best = d.max(dim=1, keepdim=True).values
    is_best = d == best
    order = torch.arange(n, 0, -1, device=d.device)
    nearest = (is_best * order).argmax(dim=1)
    counts = torch.bincount(nearest, minlength=n)
    return Assignment(nearest, counts)


def between_scatter_trace(items, assign):
    """``sum_j (n_j / K) * ||m_j - mean(m)||^2``."""
    k = assign.counts.sum()
    mean_item = items.mean(dim=0)
    weights = assign.counts.to(items.dtype) / k
    return (weights * ((items - mean_item) ** 2).sum(dim=1)).sum()


def within_scatter_trace(queries, items, assign):
    """``sum_j (n_j / K) * sum_{k in cluster j} ||z_k - m_j||^2``.

    Each query's squared distance is weighted by the size share of its own
    cluster, which is the double sum written out per query.
    """
    k = assign.counts.sum()
    sq = ((queries - items[assign.nearest]) ** 2).sum(dim=1)
    weights = assign.counts.to(queries.dtype)[assign.nearest] / k
    return (weights * sq).sum()


def discriminative_loss(queries, items, eps=DEFAULT_EPS, return_stats=False):
    """Within/between scatter trace ratio.

    The nearest-item assignment is computed from the cosine affinity and held
    constant for differentiation, so gradients flow to ``queries`` and
    ``items`` only through the two scatter sums.

    Parameters
    ----------
    queries : (K, C) tensor
    items : (N, C) tensor
    eps : float
        Added to the between-item trace to keep the ratio finite.
    return_stats : bool
        Also return a :class:`ScatterStats` with the intermediate traces.
    """
    if items.shape[0] < 2:
        raise ValueError("discriminative loss needs at least two memory items")
    with torch.no_grad():
        assign = assign_nearest(cosine_affinity(queries, items))
    tr_b = between_scatter_trace(items, assign)
    tr_w = within_scatter_trace(queries, items, assign)
    if float(tr_b.detach()) < eps and float(tr_w.detach()) > 0:
        warnings.warn(
            "between-item scatter below eps: memory items have collapsed",
            MemoryCollapseWarning,
            stacklevel=2,
        )
    loss = tr_w / (tr_b + eps)
    if not return_stats:
        return loss
    stats = ScatterStats(
        mean_item=items.detach().mean(dim=0),
        tr_between=tr_b.detach(),
        tr_within=tr_w.detach(),
        loss=loss.detach(),
        dead_items=int((assign.counts == 0).sum()),
    )
    return loss, stats
