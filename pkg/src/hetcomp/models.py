"""Embedding scorers usable as teachers or students.

Three kinds share one ranking code path (higher score = better):

* mf  — inner product, trained with the pairwise BPR objective;
* ml  — negated squared Euclidean distance in the unit ball, trained with
        a pairwise hinge objective plus projection;
* dnn — two hidden rectifier layers over concatenated embeddings, trained
        with binary cross-entropy.

All gradients are derived and applied by hand in numpy; update steps
mutate the model in place and also return it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .metrics import recall_at_k

log = logging.getLogger(__name__)

KINDS = ("mf", "ml", "dnn")


@dataclass
class EmbeddingModel:
    kind: str
    user_vecs: np.ndarray   # (num_users, dim)
    item_vecs: np.ndarray   # (num_items, dim)
    dim: int
    seed: int
    dense: dict = None      # dnn-only: W1 b1 W2 b2 w3 b3

    @property
    def num_users(self) -> int:
        return self.user_vecs.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_vecs.shape[0]

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(
            kind=self.kind,
            user_vecs=self.user_vecs.copy(),
            item_vecs=self.item_vecs.copy(),
            dim=self.dim,
            seed=self.seed,
            dense=None if self.dense is None else {k: v.copy() for k, v in self.dense.items()},
        )


def init_model(kind: str, num_users: int, num_items: int, dim: int,
               seed: int) -> EmbeddingModel:
    """Fresh model; embeddings uniform in [-0.5/dim, 0.5/dim]."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    rng = np.random.default_rng(seed)
    half = 0.5 / dim
    user_vecs = rng.uniform(-half, half, size=(num_users, dim))
    item_vecs = rng.uniform(-half, half, size=(num_items, dim))
    dense = None
    if kind == "dnn":
        def glorot(n_in, n_out):
            b = np.sqrt(6.0 / (n_in + n_out))
            return rng.uniform(-b, b, size=(n_in, n_out))
        dense = {
            "W1": glorot(2 * dim, dim), "b1": np.zeros(dim),
            "W2": glorot(dim, dim), "b2": np.zeros(dim),
            "w3": glorot(dim, 1)[:, 0], "b3": np.zeros(1),
        }
    return EmbeddingModel(kind, user_vecs, item_vecs, dim, seed, dense)


# ---------------------------------------------------------------------------
# scoring

def _dnn_forward(model, uvecs, ivecs, want_cache=False):
    d = model.dense
    x = np.concatenate([uvecs, ivecs], axis=1)
    z1 = x @ d["W1"] + d["b1"]
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ d["W2"] + d["b2"]
    h2 = np.maximum(z2, 0.0)
    s = h2 @ d["w3"] + d["b3"][0]
    if want_cache:
        return s, (x, z1, h1, z2, h2)
    return s


def score(model: EmbeddingModel, u: int, i: int) -> float:
    """Ranking score of one user-item pair."""
    return float(score_items(model, u, np.array([i]))[0])


def score_items(model: EmbeddingModel, u: int, items) -> np.ndarray:
    """Scores of `items` for one user."""
    items = np.asarray(items, dtype=np.int64)
    p = model.user_vecs[u]
    q = model.item_vecs[items]
    if model.kind == "mf":
        return q @ p
    if model.kind == "ml":
        diff = q - p
        return -np.einsum("ij,ij->i", diff, diff)
    return _dnn_forward(model, np.broadcast_to(p, q.shape), q)


def score_block(model: EmbeddingModel, users, item_chunk: int = 512) -> np.ndarray:
    """(len(users), num_items) score matrix for a block of users."""
    users = np.asarray(users, dtype=np.int64)
    P = model.user_vecs[users]
    Q = model.item_vecs
    if model.kind == "mf":
        return P @ Q.T
    if model.kind == "ml":
        sq_p = np.einsum("ij,ij->i", P, P)[:, None]
        sq_q = np.einsum("ij,ij->i", Q, Q)[None, :]
        return -(sq_p + sq_q - 2.0 * P @ Q.T)
    # first layer splits over the concatenation: z1 = P W1_top + Q W1_bot
    d = model.dense
    z1_user = P @ d["W1"][:model.dim]
    z1_item = Q @ d["W1"][model.dim:] + d["b1"]
    out = np.empty((users.size, model.num_items))
    for lo in range(0, model.num_items, item_chunk):
        hi = min(lo + item_chunk, model.num_items)
        h1 = np.maximum(z1_user[:, None, :] + z1_item[None, lo:hi, :], 0.0)
        h1 = h1.reshape(-1, model.dim)
        h2 = np.maximum(h1 @ d["W2"] + d["b2"], 0.0)
        out[:, lo:hi] = (h2 @ d["w3"] + d["b3"][0]).reshape(users.size, hi - lo)
    return out


def topk_from_scores(scores: np.ndarray, exclude, k: int) -> np.ndarray:
    """Top-k item ids by descending score, ties by ascending id.

    Exact under ties: candidates at the k-th score boundary are resolved
    by a full (score, id) sort of the candidate set only.
    """
    s = np.asarray(scores, dtype=np.float64)
    n_avail = s.size - (len(exclude) if exclude is not None else 0)
    if k > n_avail:
        raise ValueError(f"k={k} exceeds {n_avail} available items")
    if exclude is not None and len(exclude):
        s = s.copy()
        s[np.asarray(exclude, dtype=np.int64)] = -np.inf
    kth = np.partition(s, s.size - k)[s.size - k]
    cand = np.flatnonzero(s >= kth)
    order = np.lexsort((cand, -s[cand]))
    return cand[order[:k]].astype(np.int64)


def rank_topk(model: EmbeddingModel, u: int, exclude, k: int) -> np.ndarray:
    """Top-k unobserved ranking for one user (exclude = observed items)."""
    scores = score_items(model, u, np.arange(model.num_items))
    return topk_from_scores(scores, exclude, k)


def rank_topk_all(model: EmbeddingModel, exclude_lists, k: int,
                  user_block: int = 256) -> np.ndarray:
    """(num_users, k) top-k matrix; row u excludes exclude_lists[u]."""
    out = np.empty((model.num_users, k), dtype=np.int64)
    for lo in range(0, model.num_users, user_block):
        hi = min(lo + user_block, model.num_users)
        block = score_block(model, np.arange(lo, hi))
        for u in range(lo, hi):
            out[u] = topk_from_scores(block[u - lo], exclude_lists[u], k)
    return out


# ---------------------------------------------------------------------------
# update steps

def _check_finite(grads, triples, what):
    for g in grads:
        bad = ~np.isfinite(g).all(axis=-1) if g.ndim > 1 else ~np.isfinite(g)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise RuntimeError(
                f"non-finite {what} gradient for triple {tuple(int(v) for v in triples[row])}"
            )


def bpr_step(model: EmbeddingModel, triples, lr: float, reg: float) -> EmbeddingModel:
    """One SGD step on sum over (u, i+, i-) of
    -log sigmoid(f(u,i+) - f(u,i-)) + reg * (|p_u|^2 + |q_i+|^2 + |q_i-|^2)."""
    if model.kind != "mf":
        raise ValueError("bpr_step requires an mf model")
    t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    P = model.user_vecs[t[:, 0]]
    Qi = model.item_vecs[t[:, 1]]
    Qj = model.item_vecs[t[:, 2]]
    x = np.einsum("ij,ij->i", P, Qi - Qj)
    g = _stable_sigmoid(x) - 1.0          # d/dx of -log sigmoid(x)
    gu = g[:, None] * (Qi - Qj) + 2.0 * reg * P
    gi = g[:, None] * P + 2.0 * reg * Qi
    gj = -g[:, None] * P + 2.0 * reg * Qj
    _check_finite((gu, gi, gj), t, "bpr")
    np.add.at(model.user_vecs, t[:, 0], -lr * gu)
    np.add.at(model.item_vecs, t[:, 1], -lr * gi)
    np.add.at(model.item_vecs, t[:, 2], -lr * gj)
    return model


def hinge_step(model: EmbeddingModel, triples, margin: float, lr: float) -> EmbeddingModel:
    """One SGD step on sum of max(0, margin + d(u,i+)^2 - d(u,i-)^2),
    followed by unit-ball projection of every touched vector."""
    if model.kind != "ml":
        raise ValueError("hinge_step requires an ml model")
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    P = model.user_vecs[t[:, 0]]
    Qi = model.item_vecs[t[:, 1]]
    Qj = model.item_vecs[t[:, 2]]
    d_pos = np.einsum("ij,ij->i", P - Qi, P - Qi)
    d_neg = np.einsum("ij,ij->i", P - Qj, P - Qj)
    active = (margin + d_pos - d_neg > 0).astype(np.float64)[:, None]
    gu = active * 2.0 * (Qj - Qi)
    gi = active * -2.0 * (P - Qi)
    gj = active * 2.0 * (P - Qj)
    _check_finite((gu, gi, gj), t, "hinge")
    np.add.at(model.user_vecs, t[:, 0], -lr * gu)
    np.add.at(model.item_vecs, t[:, 1], -lr * gi)
    np.add.at(model.item_vecs, t[:, 2], -lr * gj)
    _project_rows(model.user_vecs, t[:, 0])
    _project_rows(model.item_vecs, t[:, 1])
    _project_rows(model.item_vecs, t[:, 2])
    return model


def mlp_step(model: EmbeddingModel, labeled_pairs, lr: float) -> EmbeddingModel:
    """One SGD step on sum of binary cross-entropy of sigmoid(score) vs y,
    back-propagated through the perceptron and both embeddings."""
    if model.kind != "dnn":
        raise ValueError("mlp_step requires a dnn model")
    t = np.asarray(labeled_pairs).reshape(-1, 3)
    users = t[:, 0].astype(np.int64)
    items = t[:, 1].astype(np.int64)
    y = t[:, 2].astype(np.float64)
    P = model.user_vecs[users]
    Q = model.item_vecs[items]
    s, (x, z1, h1, z2, h2) = _dnn_forward(model, P, Q, want_cache=True)
    ds = _stable_sigmoid(s) - y
    d = model.dense
    g_w3 = h2.T @ ds
    g_b3 = np.array([ds.sum()])
    dh2 = ds[:, None] * d["w3"][None, :]
    dz2 = dh2 * (z2 > 0)
    g_W2 = h1.T @ dz2
    g_b2 = dz2.sum(axis=0)
    dh1 = dz2 @ d["W2"].T
    dz1 = dh1 * (z1 > 0)
    g_W1 = x.T @ dz1
    g_b1 = dz1.sum(axis=0)
    dx = dz1 @ d["W1"].T
    gu = dx[:, :model.dim]
    gi = dx[:, model.dim:]
    _check_finite((gu, gi), t, "mlp")
    for name, grad in (("W1", g_W1), ("b1", g_b1), ("W2", g_W2),
                       ("b2", g_b2), ("w3", g_w3), ("b3", g_b3)):
        if not np.isfinite(grad).all():
            raise RuntimeError(f"non-finite mlp gradient in dense block {name}")
        d[name] -= lr * grad
    np.add.at(model.user_vecs, users, -lr * gu)
    np.add.at(model.item_vecs, items, -lr * gi)
    return model


def _project_rows(mat: np.ndarray, rows) -> None:
    rows = np.unique(rows)
    norms = np.linalg.norm(mat[rows], axis=1)
    over = norms > 1.0
    if over.any():
        idx = rows[over]
        mat[idx] /= norms[over][:, None]


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# teacher training

@dataclass
class TeacherConfig:
    lr: float = 0.05
    reg: float = 1e-4
    margin: float = 0.5
    neg_per_pos: int = 1
    batch_size: int = 2048
    max_epochs: int = 500
    patience: int = 10
    eval_k: int = 50
    seed: int = 0


def default_teacher_config(kind: str, seed: int = 0, **overrides) -> TeacherConfig:
    """Per-kind training defaults. The dense layers of the dnn take the
    batch-summed gradient, so it trains with small batches and a small lr."""
    base = {
        "mf": dict(lr=0.05, reg=1e-4, batch_size=2048),
        "ml": dict(lr=0.05, margin=0.5, batch_size=2048),
        "dnn": dict(lr=0.005, neg_per_pos=2, batch_size=128),
    }[kind]
    base.update(overrides)
    return TeacherConfig(seed=seed, **base)


@dataclass
class TeacherFit:
    model: EmbeddingModel          # best-validation parameters
    best_epoch: int                # 1-based converged epoch
    epochs_run: int
    val_history: list = field(default_factory=list)


def _sample_unobserved(rng, observed, users, size):
    """Uniform unobserved item per (user-row); rejection with fallback."""
    num_items = observed.shape[1]
    out = rng.integers(0, num_items, size=size)
    for _ in range(30):
        bad = observed[users, out]
        if not bad.any():
            return out
        out[bad] = rng.integers(0, num_items, size=int(bad.sum()))
    bad = np.flatnonzero(observed[users, out])
    for idx in bad:
        pool = np.flatnonzero(~observed[users[idx]])
        out[idx] = rng.choice(pool)
    return out


def train_teacher(model: EmbeddingModel, dataset, cfg: TeacherConfig,
                  on_epoch_end=None) -> TeacherFit:
    """Train until validation Recall@eval_k stops improving.

    `on_epoch_end(epoch, model, topk)` fires after every epoch's updates
    with that epoch's top-eval_k unobserved ranking, which is how
    trajectory recording captures per-epoch rankings without rescoring.
    The returned fit carries the best-validation model and its 1-based
    epoch.
    """
    rng = np.random.default_rng(cfg.seed)
    observed = dataset.observed_matrix()
    pos_u = np.concatenate([np.full(len(items), u, dtype=np.int64)
                            for u, items in enumerate(dataset.train_items)])
    pos_i = np.concatenate(dataset.train_items).astype(np.int64)
    has_valid = [u for u in range(dataset.num_users) if len(dataset.valid_items[u])]

    best = None
    best_val = -np.inf
    best_epoch = 0
    val_history = []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(pos_u.size)
        if model.kind == "dnn":
            reps = 1 + cfg.neg_per_pos
            users = np.repeat(pos_u[order], reps)
            items = np.repeat(pos_i[order], reps)
            labels = np.tile(np.r_[1.0, np.zeros(cfg.neg_per_pos)], pos_u.size)
            negs = _sample_unobserved(rng, observed, users, users.size)
            items = np.where(labels == 1.0, items, negs)
            batch = np.column_stack([users, items, labels])
            for lo in range(0, batch.shape[0], cfg.batch_size):
                mlp_step(model, batch[lo:lo + cfg.batch_size], cfg.lr)
        else:
            users = pos_u[order]
            pos = pos_i[order]
            neg = _sample_unobserved(rng, observed, users, users.size)
            triples = np.column_stack([users, pos, neg])
            for lo in range(0, triples.shape[0], cfg.batch_size):
                chunk = triples[lo:lo + cfg.batch_size]
                if model.kind == "mf":
                    bpr_step(model, chunk, cfg.lr, cfg.reg)
                else:
                    hinge_step(model, chunk, cfg.margin, cfg.lr)

        topk = rank_topk_all(model, dataset.train_items, cfg.eval_k)
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, topk)

        val = float(np.mean([recall_at_k(topk[u], dataset.valid_items[u], cfg.eval_k)
                             for u in has_valid])) if has_valid else 0.0
        val_history.append(val)
        if val > best_val:
            best_val = val
            best_epoch = epoch
            best = model.copy()
        elif epoch - best_epoch >= cfg.patience:
            break

    if best is None:
        best = model.copy()
        best_epoch = max(epoch, 1)
    return TeacherFit(model=best, best_epoch=best_epoch, epochs_run=epoch,
                      val_history=val_history)


# ---------------------------------------------------------------------------
# checkpoint files: one ascii header line, then raw little-endian float32
# parameter blocks in a fixed per-kind order.

_DNN_BLOCKS = ("W1", "b1", "W2", "b2", "w3", "b3")


def save_model(model: EmbeddingModel, path) -> None:
    """Layout: header `HCMODEL v1 kind=<k> dim=<d> users=<U> items=<I> seed=<s>\\n`,
    then user_vecs, item_vecs (and for dnn: W1 b1 W2 b2 w3 b3), each as
    C-order float32 little-endian bytes."""
    with open(path, "wb") as fh:
        fh.write(f"HCMODEL v1 kind={model.kind} dim={model.dim} "
                 f"users={model.num_users} items={model.num_items} "
                 f"seed={model.seed}\n".encode("ascii"))
        blocks = [model.user_vecs, model.item_vecs]
        if model.kind == "dnn":
            blocks += [model.dense[name] for name in _DNN_BLOCKS]
        for blk in blocks:
            fh.write(np.ascontiguousarray(blk, dtype="<f4").tobytes())


def load_model(path) -> EmbeddingModel:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").strip()
        fields = dict(part.split("=") for part in header.split()[2:])
        kind = fields["kind"]
        dim = int(fields["dim"])
        nu, ni = int(fields["users"]), int(fields["items"])
        if not header.startswith("HCMODEL v1"):
            raise ValueError(f"{path}: not a model checkpoint")

        def read_block(shape):
            n = int(np.prod(shape))
            buf = fh.read(4 * n)
            if len(buf) != 4 * n:
                raise ValueError(f"{path}: truncated checkpoint")
            return np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape)

        user_vecs = read_block((nu, dim))
        item_vecs = read_block((ni, dim))
        dense = None
        if kind == "dnn":
            shapes = {"W1": (2 * dim, dim), "b1": (dim,), "W2": (dim, dim),
                      "b2": (dim,), "w3": (dim,), "b3": (1,)}
            dense = {name: read_block(shapes[name]) for name in _DNN_BLOCKS}
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after parameter blocks")
    return EmbeddingModel(kind, user_vecs, item_vecs, dim, int(fields["seed"]), dense)
