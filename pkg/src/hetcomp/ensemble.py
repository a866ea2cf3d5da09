"""Consistency-weighted rank aggregation.

Each teacher contributes an importance score per item it ranks:
``exp(-rank/lam) + exp(-rank_std/lam)`` — high position plus stable
position over the teacher's recent epochs. Items absent from a teacher's
stored top-K contribute 0 for that teacher, and the consolidated list
orders items by importance averaged over *all* teachers, so items seen by
few teachers are penalized.
"""

from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)

HISTORY_LEN = 5


def rank_std(history, k: int) -> float:
    """Population standard deviation (divisor 5) of a 5-epoch rank history.

    Negative entries are the "fell out of the top-k" sentinel and are
    replaced by `k` before computing.
    """
    h = np.asarray(history, dtype=np.float64).ravel()
    if h.size != HISTORY_LEN:
        raise ValueError(f"rank history must have exactly {HISTORY_LEN} values, got {h.size}")
    h = np.where(h < 0, float(k), h)
    return float(np.sqrt(np.mean((h - h.mean()) ** 2)))


def rank_std_rows(histories: np.ndarray, k: int) -> np.ndarray:
    """`rank_std` over the last axis of an (..., 5) array of rank histories."""
    h = np.asarray(histories, dtype=np.float64)
    if h.shape[-1] != HISTORY_LEN:
        raise ValueError(f"rank histories must have {HISTORY_LEN} columns, got {h.shape[-1]}")
    h = np.where(h < 0, float(k), h)
    return np.sqrt(np.mean((h - h.mean(axis=-1, keepdims=True)) ** 2, axis=-1))


def importance(rank, std, lam: float):
    """Per-teacher item importance, in (0, 2]. Accepts scalars or arrays."""
    rank = np.asarray(rank, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    val = np.exp(-rank / lam) + np.exp(-std / lam)
    return float(val) if val.ndim == 0 else val


def ensemble_rank(selected, consistency=None, lam: float = 10.0,
                  k_out: int = 50) -> np.ndarray:
    """Consolidate one ranked list per teacher into a single list.

    Args:
      selected: sequence of 1-D item-id arrays, one per teacher.
      consistency: matching sequence of per-position rank-std arrays, or
        None for std = 0 everywhere.
      lam: sharpness of both exponential terms.
      k_out: length of the output list; truncated (with a log line) when it
        exceeds the union of the input lists.

    Ties in mean importance break by (greater appearance count, ascending
    item id). The result is invariant to teacher order.
    """
    lists = [np.asarray(lst, dtype=np.int64).ravel() for lst in selected]
    if not lists or any(lst.size == 0 for lst in lists):
        raise ValueError("need at least one teacher and no empty lists")
    if consistency is None:
        stds = [np.zeros(lst.size) for lst in lists]
    else:
        stds = [np.asarray(sd, dtype=np.float64).ravel() for sd in consistency]
        if len(stds) != len(lists) or any(sd.size != lst.size for sd, lst in zip(stds, lists)):
            raise ValueError("consistency records must align with the selected lists")

    union = np.unique(np.concatenate(lists))
    m = len(lists)
    scores = np.zeros((union.size, m))
    present = np.zeros((union.size, m), dtype=bool)
    for x, (lst, sd) in enumerate(zip(lists, stds)):
        idx = np.searchsorted(union, lst)
        scores[idx, x] = importance(np.arange(lst.size), sd, lam)
        present[idx, x] = True

    mean_imp = scores.sum(axis=1) / m
    counts = present.sum(axis=1)
    order = np.lexsort((union, -counts, -mean_imp))

    if k_out > union.size:
        log.info("ensemble k_out=%d exceeds union size %d; truncating", k_out, union.size)
        k_out = union.size
    return union[order[:k_out]]
