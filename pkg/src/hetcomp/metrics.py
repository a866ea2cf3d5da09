"""Ranking metrics.

Two families live here:

* list-vs-list metrics that treat a reference ranked list as ground truth:
  geometric relevance, DCG, and the discrepancy ``D@K = 1 - NDCG@K``;
* held-out evaluation with binary relevance: Recall@K and NDCG@K.

A "ranked list" is a 1-D integer array of distinct item ids; position 0 is
the best rank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RelevanceParams:
    """Geometric relevance: an item at rank r of the reference list gets
    y = exp(-r / lam), items outside the top-k get 0."""

    lam: float = 10.0
    k: int = 50

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")


def as_ranked_list(items) -> np.ndarray:
    """Validate and normalize a ranked list: distinct ids, length >= 1."""
    arr = np.asarray(items, dtype=np.int64).ravel()
    if arr.size < 1:
        raise ValueError("ranked list must contain at least one item")
    if np.unique(arr).size != arr.size:
        raise ValueError("ranked list contains duplicate item ids")
    return arr


def relevance(target, item: int, params: RelevanceParams) -> float:
    """Relevance of `item` judged by its rank in `target` (0 outside top-k)."""
    target = np.asarray(target)
    pos = np.flatnonzero(target == item)
    if pos.size == 0 or pos[0] >= params.k:
        return 0.0
    return float(np.exp(-pos[0] / params.lam))


def _rank_in_target(pi, target, k: int) -> np.ndarray:
    """Rank of each item of `pi` within `target`'s top-k; k means 'outside'."""
    pi = np.asarray(pi)
    target = np.asarray(target)[:k]
    pos = {int(it): r for r, it in enumerate(target)}
    return np.array([pos.get(int(it), k) for it in pi], dtype=np.int64)


def gain_table(params: RelevanceParams) -> np.ndarray:
    """Gain 2**exp(-r/lam) - 1 for ranks 0..k-1 plus a 0 slot for 'outside'."""
    ranks = np.arange(params.k + 1, dtype=np.float64)
    gains = np.power(2.0, np.exp(-ranks / params.lam)) - 1.0
    gains[params.k] = 0.0
    return gains


def dcg_from_ranks(ranks: np.ndarray, params: RelevanceParams) -> np.ndarray:
    """DCG of lists given item ranks in the reference (last axis = position).

    `ranks` holds r(target, item) for each list position, with the sentinel
    `params.k` for items outside the reference top-k. Positions beyond
    `params.k` must already be trimmed by the caller.
    """
    ranks = np.asarray(ranks)
    gains = gain_table(params)[np.minimum(ranks, params.k)]
    positions = np.arange(1, ranks.shape[-1] + 1, dtype=np.float64)
    discounts = 1.0 / np.log2(positions + 1.0)
    return (gains * discounts).sum(axis=-1)


def dcg_at_k(pi, target, params: RelevanceParams) -> float:
    """DCG of `pi` over positions 1..k with geometric relevance from `target`.

    Positions beyond the stored length of `pi` contribute 0.
    """
    pi = np.asarray(pi)[: params.k]
    if pi.size == 0:
        return 0.0
    ranks = _rank_in_target(pi, target, params.k)
    return float(dcg_from_ranks(ranks, params))


def ideal_dcg(params: RelevanceParams) -> float:
    """DCG of a reference list measured against itself (ranks 0..k-1)."""
    return float(dcg_from_ranks(np.arange(params.k), params))


def discrepancy(pi, target, params: RelevanceParams) -> float:
    """1 - NDCG@k of `pi` against `target`; 0 means the top-k is preserved."""
    target = np.asarray(target)
    if target.size < params.k:
        raise ValueError(
            f"target length {target.size} is below the cutoff k={params.k}"
        )
    return 1.0 - dcg_at_k(pi, target, params) / ideal_dcg(params)


def discrepancy_rows(pi_rows: np.ndarray, rank_lookup: np.ndarray,
                     params: RelevanceParams) -> np.ndarray:
    """Vectorized discrepancy for many users at once.

    pi_rows: (n, L) item ids per user (student lists, L >= 1).
    rank_lookup: (n, num_items) array mapping item id -> rank in that user's
    reference list, with `params.k` everywhere else (see `rank_lookup_rows`).
    """
    pi_rows = np.asarray(pi_rows)[:, : params.k]
    ranks = np.take_along_axis(rank_lookup, pi_rows, axis=1)
    return 1.0 - dcg_from_ranks(ranks, params) / ideal_dcg(params)


def rank_lookup_rows(target_rows: np.ndarray, num_items: int, k: int) -> np.ndarray:
    """Build per-user item->rank lookups from (n, >=k) reference rows."""
    target_rows = np.asarray(target_rows)[:, :k]
    lookup = np.full((target_rows.shape[0], num_items), k, dtype=np.int32)
    np.put_along_axis(lookup, target_rows,
                      np.arange(k, dtype=np.int32)[None, :], axis=1)
    return lookup


def recall_at_k(pi, held_out, k: int) -> float:
    """|top-k(pi) ∩ held_out| / |held_out|."""
    held = set(int(i) for i in held_out)
    if not held:
        raise ValueError("held_out set must be nonempty")
    top = np.asarray(pi)[:k]
    hits = sum(1 for it in top if int(it) in held)
    return hits / len(held)


def ndcg_eval(pi, held_out, k: int) -> float:
    """NDCG@k with binary relevance against a held-out item set."""
    held = set(int(i) for i in held_out)
    if not held:
        raise ValueError("held_out set must be nonempty")
    top = np.asarray(pi)[:k]
    dcg = sum(1.0 / np.log2(j + 2.0) for j, it in enumerate(top) if int(it) in held)
    n_ideal = min(k, len(held))
    idcg = sum(1.0 / np.log2(j + 2.0) for j in range(n_ideal))
    return float(dcg / idcg)
