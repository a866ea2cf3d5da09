"""Implicit-feedback interaction logs: loading, k-core filtering, splits.

Input format is one interaction per line, `<user-token> <item-token>
[weight]`, whitespace- or tab-separated; `#` lines are comments. Feedback
is binary, so duplicate (user, item) pairs collapse to one interaction
before filtering and weights are ignored.
"""

from __future__ import annotations

import logging
import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class ParseError(ValueError):
    pass


@dataclass
class InteractionDataset:
    """Dense-id interaction data with per-user train/valid/test splits.

    User ids are [0, num_users) and item ids [0, num_items); the three
    per-user splits are pairwise disjoint, every user keeps at least one
    train item, and `seed` fully determines the partition.
    """

    num_users: int
    num_items: int
    train_items: list       # per user: np.ndarray of item ids, ascending
    valid_items: list
    test_items: list
    seed: int
    user_tokens: list
    item_tokens: list
    ratios: tuple = (0.8, 0.1, 0.1)
    dropped_users: int = 0
    _observed: np.ndarray = field(default=None, repr=False, compare=False)

    def observed_matrix(self) -> np.ndarray:
        """Boolean (num_users, num_items) mask of train interactions."""
        if self._observed is None:
            obs = np.zeros((self.num_users, self.num_items), dtype=bool)
            for u, items in enumerate(self.train_items):
                obs[u, items] = True
            self._observed = obs
        return self._observed

    def n_interactions(self) -> tuple:
        return (sum(len(a) for a in self.train_items),
                sum(len(a) for a in self.valid_items),
                sum(len(a) for a in self.test_items))


def load_interactions(path, fmt: str = "whitespace"):
    """Read raw (user-token, item-token) pairs, preserving file order.

    Duplicates are retained at this stage. Malformed lines raise
    ParseError naming the 1-based line number; a file with no records is
    an error.
    """
    if fmt not in ("whitespace", "tab"):
        raise ValueError(f"unknown format {fmt!r}")
    sep = None if fmt == "whitespace" else "\t"
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split(sep)
            if len(fields) not in (2, 3):
                raise ParseError(
                    f"{path}: line {lineno}: expected 'user item [weight]', got {line!r}"
                )
            if len(fields) == 3:
                try:
                    float(fields[2])
                except ValueError:
                    raise ParseError(
                        f"{path}: line {lineno}: weight {fields[2]!r} is not a number"
                    ) from None
            pairs.append((fields[0], fields[1]))
    if not pairs:
        raise ParseError(f"{path}: no interactions found")
    return pairs


def kcore_filter(pairs, k: int):
    """Iteratively drop users/items with fewer than k interactions.

    Exact duplicate pairs are collapsed first. The surviving set is a
    fixed point and independent of removal order; first-occurrence order
    is preserved. May return an empty list.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    seen = set()
    deduped = []
    for p in pairs:
        if p not in seen:
            seen.add(p)
            deduped.append(p)
    current = deduped
    while True:
        ucount = Counter(u for u, _ in current)
        icount = Counter(i for _, i in current)
        kept = [(u, i) for u, i in current
                if ucount[u] >= k and icount[i] >= k]
        if len(kept) == len(current):
            return current
        current = kept


def split(pairs, ratios, seed: int) -> InteractionDataset:
    """Per-user random holdout split with dense ids.

    Ratios are (train, valid, test), positive, summing to 1; valid and
    test sizes are floored, the remainder goes to train. Users with fewer
    than 3 interactions are dropped (logged, not fatal). Tokens densify in
    sorted order, so the same pair set and seed give an identical dataset.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be three positive values, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")

    by_user = defaultdict(list)
    seen = set()
    for u, i in pairs:
        if (u, i) not in seen:
            seen.add((u, i))
            by_user[u].append(i)

    dropped = [u for u, items in by_user.items() if len(items) < 3]
    for u in dropped:
        del by_user[u]
    if dropped:
        log.info("split: dropped %d users with < 3 interactions", len(dropped))
    if not by_user:
        raise ValueError("no users with >= 3 interactions survive the split")

    user_tokens = sorted(by_user)
    item_tokens = sorted({i for items in by_user.values() for i in items})
    item_id = {tok: j for j, tok in enumerate(item_tokens)}

    rng = np.random.default_rng(seed)
    train, valid, test = [], [], []
    for tok in user_tokens:
        items = np.array([item_id[i] for i in by_user[tok]], dtype=np.int64)
        perm = rng.permutation(items.size)
        n_valid = math.floor(items.size * ratios[1])
        n_test = math.floor(items.size * ratios[2])
        valid.append(np.sort(items[perm[:n_valid]]))
        test.append(np.sort(items[perm[n_valid:n_valid + n_test]]))
        train.append(np.sort(items[perm[n_valid + n_test:]]))

    return InteractionDataset(
        num_users=len(user_tokens),
        num_items=len(item_tokens),
        train_items=train,
        valid_items=valid,
        test_items=test,
        seed=seed,
        user_tokens=user_tokens,
        item_tokens=item_tokens,
        ratios=ratios,
        dropped_users=len(dropped),
    )


def save_dataset(ds: InteractionDataset, out_dir) -> None:
    """Write manifest + id-mapped split files + token maps."""
    os.makedirs(out_dir, exist_ok=True)
    n_train, n_valid, n_test = ds.n_interactions()
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"num_users={ds.num_users}\n")
        fh.write(f"num_items={ds.num_items}\n")
        fh.write(f"n_train={n_train}\n")
        fh.write(f"n_valid={n_valid}\n")
        fh.write(f"n_test={n_test}\n")
        fh.write(f"seed={ds.seed}\n")
        fh.write(f"ratios={ds.ratios[0]},{ds.ratios[1]},{ds.ratios[2]}\n")
        fh.write(f"dropped_users={ds.dropped_users}\n")
    for name, split_items in (("train", ds.train_items),
                              ("valid", ds.valid_items),
                              ("test", ds.test_items)):
        with open(os.path.join(out_dir, f"{name}.txt"), "w", encoding="utf-8") as fh:
            for u, items in enumerate(split_items):
                for i in items:
                    fh.write(f"{u} {int(i)}\n")
    for name, tokens in (("users", ds.user_tokens), ("items", ds.item_tokens)):
        with open(os.path.join(out_dir, f"{name}.txt"), "w", encoding="utf-8") as fh:
            for tok in tokens:
                fh.write(f"{tok}\n")


def load_dataset(in_dir) -> InteractionDataset:
    manifest = {}
    with open(os.path.join(in_dir, "manifest.txt"), "r", encoding="utf-8") as fh:
        for line in fh:
            key, _, value = line.strip().partition("=")
            manifest[key] = value
    num_users = int(manifest["num_users"])
    num_items = int(manifest["num_items"])
    splits = {}
    for name in ("train", "valid", "test"):
        per_user = [[] for _ in range(num_users)]
        with open(os.path.join(in_dir, f"{name}.txt"), "r", encoding="utf-8") as fh:
            for line in fh:
                u, i = line.split()
                per_user[int(u)].append(int(i))
        splits[name] = [np.array(items, dtype=np.int64) for items in per_user]
    tokens = {}
    for name in ("users", "items"):
        with open(os.path.join(in_dir, f"{name}.txt"), "r", encoding="utf-8") as fh:
            tokens[name] = [line.rstrip("\n") for line in fh]
    return InteractionDataset(
        num_users=num_users,
        num_items=num_items,
        train_items=splits["train"],
        valid_items=splits["valid"],
        test_items=splits["test"],
        seed=int(manifest["seed"]),
        user_tokens=tokens["users"],
        item_tokens=tokens["items"],
        ratios=tuple(float(x) for x in manifest["ratios"].split(",")),
        dropped_users=int(manifest.get("dropped_users", "0")),
    )
