"""Seeded synthetic implicit-feedback generator for desk-scale experiments.

Users come from a handful of latent taste clusters, items carry a Zipf-like
popularity bias, and each user's interactions are drawn without replacement
from a softmax over affinity + popularity. The latent dimensionality is
deliberately higher than a small student embedding, so compact models
cannot emulate converged large teachers perfectly.
"""

from __future__ import annotations

import numpy as np


def generate_interactions(num_users: int = 1000, num_items: int = 2000,
                          mean_per_user: float = 30.0, latent_dim: int = 16,
                          num_clusters: int = 10, popularity_weight: float = 1.0,
                          popularity_exponent: float = 0.9,
                          temperature: float = 1.0, seed: int = 0):
    """Return raw (user-token, item-token) pairs, ready for `split`."""
    rng = np.random.default_rng(seed)

    centers = rng.normal(size=(num_clusters, latent_dim))
    user_cluster = rng.integers(0, num_clusters, size=num_users)
    users = centers[user_cluster] + 0.6 * rng.normal(size=(num_users, latent_dim))
    items = rng.normal(size=(num_items, latent_dim))

    # Zipf-ish popularity, shuffled so item id carries no signal.
    pop = (np.arange(1, num_items + 1, dtype=np.float64)) ** (-popularity_exponent)
    rng.shuffle(pop)
    log_pop = np.log(pop)

    affinity = users @ items.T / np.sqrt(latent_dim)
    logits = affinity / temperature + popularity_weight * log_pop[None, :]

    pairs = []
    for u in range(num_users):
        n_u = max(5, int(rng.poisson(mean_per_user)))
        n_u = min(n_u, num_items)
        z = logits[u] - logits[u].max()
        p = np.exp(z)
        p /= p.sum()
        chosen = rng.choice(num_items, size=n_u, replace=False, p=p)
        for i in chosen:
            pairs.append((f"u{u}", f"i{int(i)}"))
    return pairs


def write_interactions(pairs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in pairs:
            fh.write(f"{u} {i}\n")
