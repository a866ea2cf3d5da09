"""Listwise distillation objectives and their analytic score gradients.

Both losses rank a positive list P above a negative pool N:

* `loss_fine` is the Plackett-Luce negative log-likelihood of P's exact
  order over [P; N]: position k competes against the P-suffix from k on
  plus all of N.
* `loss_overall` drops the intra-P ordering: each P item competes only
  against N.

All softmax terms are computed max-shifted, so arbitrary finite score
magnitudes are safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ScoredLists:
    """Model scores for one user's (P, N) lists, P in its ranked order."""

    p_scores: np.ndarray
    n_scores: np.ndarray

    def __post_init__(self):
        self.p_scores = np.asarray(self.p_scores, dtype=np.float64).ravel()
        self.n_scores = np.asarray(self.n_scores, dtype=np.float64).ravel()
        if self.p_scores.size == 0:
            raise ValueError("p_scores must be nonempty")
        if not np.all(np.isfinite(self.p_scores)) or not np.all(np.isfinite(self.n_scores)):
            raise ValueError("scores must be finite")


def _fine_denominators(s: ScoredLists):
    """Max-shifted exps and the per-position denominator of the sequential
    softmax, plus the shift itself."""
    if s.n_scores.size:
        m = max(s.p_scores.max(), s.n_scores.max())
    else:
        m = s.p_scores.max()
    ep = np.exp(s.p_scores - m)
    en = np.exp(s.n_scores - m)
    # suffix[k] = sum_{j >= k} exp(p_j - m)
    suffix = np.cumsum(ep[::-1])[::-1]
    denom = suffix + en.sum()
    return ep, en, denom, m


def loss_fine(s: ScoredLists) -> float:
    """Plackett-Luce NLL of P's order over [P; N]."""
    _, _, denom, m = _fine_denominators(s)
    return float(np.sum(np.log(denom)) - np.sum(s.p_scores - m))


def grad_fine(s: ScoredLists):
    """d loss_fine / d scores, returned as (grad_P, grad_N)."""
    ep, en, denom, _ = _fine_denominators(s)
    # coeff[a] = sum_{k <= a} 1 / denom_k: item a sits in denominators 1..a.
    coeff = np.cumsum(1.0 / denom)
    gp = ep * coeff - 1.0
    gn = en * coeff[-1]
    return gp, gn


def loss_overall(s: ScoredLists) -> float:
    """Order-free variant: each P item against the whole N pool."""
    if s.n_scores.size == 0:
        return 0.0
    lse_n = _logsumexp(s.n_scores)
    # each term is -log sigmoid(p_k - lse_n) = softplus(lse_n - p_k)
    return float(np.logaddexp(0.0, lse_n - s.p_scores).sum())


def grad_overall(s: ScoredLists):
    """d loss_overall / d scores, returned as (grad_P, grad_N)."""
    if s.n_scores.size == 0:
        return np.zeros_like(s.p_scores), np.zeros_like(s.n_scores)
    lse_n = _logsumexp(s.n_scores)
    # t_k = exp(p_k) / (exp(p_k) + Z_N)
    t = _sigmoid(s.p_scores - lse_n)
    gp = t - 1.0
    softmax_n = np.exp(s.n_scores - lse_n)
    gn = softmax_n * (1.0 - t).sum()
    return gp, gn


def hetcomp_loss(p_plus: ScoredLists, p_minus: ScoredLists, mode: str) -> float:
    """Composite transfer loss: the chosen objective on (P+, N) and (P-, N).

    The two lists never enter each other's denominators, so raising a P-
    score cannot increase the P+ term.
    """
    if not np.array_equal(p_plus.n_scores, p_minus.n_scores):
        raise ValueError("p_plus and p_minus must share the same N scores")
    fn = {"overall": loss_overall, "fine": loss_fine}.get(mode)
    if fn is None:
        raise ValueError(f"mode must be 'overall' or 'fine', got {mode!r}")
    return fn(p_plus) + fn(p_minus)


def _logsumexp(x: np.ndarray) -> float:
    m = x.max()
    return float(m + np.log(np.exp(x - m).sum()))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
