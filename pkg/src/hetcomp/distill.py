"""The distillation procedure: trajectory recording, target construction,
and the student training loop.

Per epoch, every user contributes one gradient step on the composite
transfer loss over (P+, P-, N):

* P+ — the user's observed items in consensus (ensemble) order, built once
  from the converged teachers;
* P- — the head of the user's current dynamic target ranking;
* N  — negatives resampled every step from the remaining unobserved items.

Users still climbing the curriculum train with the order-free objective;
once a user's every teacher slot reaches the final checkpoint, that user
switches to the fine-grained Plackett-Luce objective. Curriculum updates
run every `period` epochs, with the advancement threshold annealed on the
same schedule.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .curriculum import (SelectionState, TeacherTrajectory, anneal_alpha,
                         converged_mask, dkc_update, final_ensemble,
                         init_selection_state, next_checkpoint_discrepancy)
from .ensemble import ensemble_rank, rank_std_rows
from .losses import ScoredLists, grad_fine, grad_overall, loss_fine, loss_overall
from .metrics import (RelevanceParams, discrepancy_rows, ndcg_eval,
                      rank_lookup_rows, recall_at_k)
from .models import (EmbeddingModel, init_model, rank_topk_all, score_items,
                     train_teacher)

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_dkc", "no_ado", "no_pplus", "merged_pd", "stacked", "rrd")


@dataclass
class TrainConfig:
    """Distillation hyperparameters (defaults are the standard setting)."""

    period: int = 10            # epochs between curriculum updates
    alpha0: float = 1.05        # initial advancement threshold
    anneal: float = 0.995       # threshold decay per period
    lam: float = 10.0           # relevance sharpness
    k_dkc: int = 50             # D@K cutoff for curriculum decisions
    e_states: int = 4           # checkpoints per teacher
    p_minus_size: int = 50      # |P-|
    n_sample_size: int = 50     # negatives per user per step
    lr: float = 0.1
    reg: float = 1e-4
    max_epochs: int = 300
    patience: int = 10
    seed: int = 0
    batch_users: int = 256

    def __post_init__(self):
        for name in ("period", "alpha0", "anneal", "lam", "k_dkc", "e_states",
                     "p_minus_size", "n_sample_size", "lr", "max_epochs"):
            if getattr(self, name) <= 0 and not (name == "max_epochs" and self.max_epochs == 0):
                raise ValueError(f"TrainConfig.{name} must be positive")


@dataclass
class DistillTargets:
    """Per-user transfer lists; N is sampled fresh from n_pool each step."""

    p_plus: np.ndarray
    p_minus: np.ndarray
    n_pool: np.ndarray
    n_sample_size: int


@dataclass
class TrainLog:
    """Per-epoch metrics plus an audit trail of the curriculum."""

    rows: list = field(default_factory=list)
    v_snapshots: list = field(default_factory=list)     # (epoch, v copy)
    fine_mask_history: list = field(default_factory=list)
    converged_history: list = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    final_state: SelectionState = None

    COLUMNS = ("epoch", "D@10", "D@50", "R@10_valid", "N@10_valid",
               "mean_v", "alpha", "loss", "mode_frac_fine")

    def add_row(self, values: dict):
        self.rows.append(tuple(values[c] for c in self.COLUMNS))

    def to_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\t".join(self.COLUMNS) + "\n")
            for row in self.rows:
                fh.write("\t".join(
                    str(v) if isinstance(v, int) else f"{v:.6f}" for v in row) + "\n")


# ---------------------------------------------------------------------------
# trajectory recording and files

def checkpoint_epochs(converged_epoch: int, e_states: int) -> list:
    """Evenly spaced 1-based checkpoint epochs ceil(T*e/E), forced distinct."""
    epochs = []
    prev = 0
    for e in range(1, e_states + 1):
        ep = max(prev + 1, -(-converged_epoch * e // e_states))  # ceil division
        epochs.append(ep)
        prev = ep
    if epochs[-1] > converged_epoch:
        raise ValueError(
            f"teacher converged after {converged_epoch} epochs; cannot place "
            f"{e_states} distinct checkpoints - lower E"
        )
    return epochs


def _rank_histories(snapshots, checkpoint_epoch: int, items: np.ndarray,
                    num_items: int, k: int) -> np.ndarray:
    """Rank of each stored item over the 5 epochs ending at the checkpoint.

    Epochs before the first are padded by repeating the earliest available
    one; items outside an epoch's top-k get the sentinel k.
    """
    window = [max(1, checkpoint_epoch - off) for off in range(4, -1, -1)]
    hist = np.empty(items.shape + (5,), dtype=np.float64)
    for w, ep in enumerate(window):
        lookup = rank_lookup_rows(snapshots[ep - 1], num_items, k)
        hist[:, :, w] = np.take_along_axis(lookup, items, axis=1)
    return hist


def record_trajectory(kind: str, dataset, dim: int, e_states: int, k: int,
                      teacher_cfg, consistency_mode: str = "per_checkpoint"):
    """Train one teacher and capture its trajectory.

    Checkpoints sit at ceil(T*e/E) of the converged epoch T*; each stores
    every user's top-k unobserved ranking plus the rank-consistency of
    those items over the trailing 5 epochs. The converged model also
    contributes the full observed-item ranking. With
    consistency_mode="converged_only" the consistency window at T* is
    reused for every checkpoint's items.

    Returns (TeacherTrajectory, TeacherFit).
    """
    if consistency_mode not in ("per_checkpoint", "converged_only"):
        raise ValueError(f"unknown consistency mode {consistency_mode!r}")
    model = init_model(kind, dataset.num_users, dataset.num_items, dim,
                       teacher_cfg.seed)
    snapshots = []

    def capture(epoch, m, topk):
        if k <= teacher_cfg.eval_k:
            snapshots.append(topk[:, :k].astype(np.int32))
        else:
            snapshots.append(rank_topk_all(m, dataset.train_items, k).astype(np.int32))

    fit = train_teacher(model, dataset, teacher_cfg, on_epoch_end=capture)
    epochs = checkpoint_epochs(fit.best_epoch, e_states)

    items = np.stack([snapshots[ep - 1] for ep in epochs])
    stds = np.empty_like(items, dtype=np.float64)
    for ci, ep in enumerate(epochs):
        window_epoch = fit.best_epoch if consistency_mode == "converged_only" else ep
        hist = _rank_histories(snapshots, window_epoch, items[ci],
                               dataset.num_items, k)
        stds[ci] = rank_std_rows(hist, k)

    obs_items = []
    for u in range(dataset.num_users):
        obs = dataset.train_items[u]
        scores = score_items(fit.model, u, obs)
        order = np.lexsort((obs, -scores))
        obs_items.append(obs[order])

    traj = TeacherTrajectory(kind=kind, e_states=e_states, k=k,
                             num_users=dataset.num_users, items=items,
                             stds=stds, obs_items=obs_items)
    return traj, fit


def save_trajectory(traj: TeacherTrajectory, path) -> None:
    """Plain-text trajectory file; round-trips exactly (std values via repr)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"HCTRAJ v1 teacher={traj.kind} E={traj.e_states} "
                 f"K={traj.k} users={traj.num_users}\n")
        for u in range(traj.num_users):
            fh.write(f"u {u}\n")
            for e in range(traj.e_states):
                fh.write(f"e {e + 1}\n")
                fh.write(" ".join(str(int(i)) for i in traj.items[e, u]) + "\n")
                fh.write(" ".join(repr(float(s)) for s in traj.stds[e, u]) + "\n")
            fh.write("obs\n")
            fh.write(" ".join(str(int(i)) for i in traj.obs_items[u]) + "\n")


def load_trajectory(path) -> TeacherTrajectory:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if header[:2] != ["HCTRAJ", "v1"]:
            raise ValueError(f"{path}: not a trajectory file")
        fields = dict(part.split("=") for part in header[2:])
        kind = fields["teacher"]
        e_states, k = int(fields["E"]), int(fields["K"])
        num_users = int(fields["users"])

        items = np.empty((e_states, num_users, k), dtype=np.int64)
        stds = np.empty((e_states, num_users, k), dtype=np.float64)
        obs_items = []
        for u in range(num_users):
            tag = fh.readline().split()
            if tag != ["u", str(u)]:
                raise ValueError(f"{path}: expected 'u {u}', got {tag}")
            for e in range(e_states):
                tag = fh.readline().split()
                if tag != ["e", str(e + 1)]:
                    raise ValueError(f"{path}: user {u}: expected 'e {e + 1}', got {tag}")
                row = np.array(fh.readline().split(), dtype=np.int64)
                std = np.array(fh.readline().split(), dtype=np.float64)
                if row.size != k or std.size != k:
                    raise ValueError(f"{path}: user {u} checkpoint {e + 1}: "
                                     f"expected {k} ids and {k} std values")
                items[e, u] = row
                stds[e, u] = std
            if fh.readline().strip() != "obs":
                raise ValueError(f"{path}: user {u}: missing 'obs' section")
            obs_items.append(np.array(fh.readline().split(), dtype=np.int64))
        if fh.readline():
            raise ValueError(f"{path}: trailing content after user {num_users - 1}")

    sorted_rows = np.sort(items.reshape(-1, k), axis=1)
    if np.any(sorted_rows[:, 1:] == sorted_rows[:, :-1]):
        raise ValueError(f"{path}: duplicate item ids inside a checkpoint list")
    return TeacherTrajectory(kind=kind, e_states=e_states, k=k,
                             num_users=num_users, items=items, stds=stds,
                             obs_items=obs_items)


# ---------------------------------------------------------------------------
# target construction

def build_p_plus(trajectories, dataset, lam: float = 10.0) -> list:
    """Consensus ranking of each user's observed items, built once from the
    converged teachers (rank-consistency is not stored for observed items,
    so only the position term weighs in)."""
    out = []
    for u in range(dataset.num_users):
        if len(dataset.train_items[u]) == 0:
            out.append(np.empty(0, dtype=np.int64))
            continue
        lists = [traj.obs_items[u] for traj in trajectories]
        out.append(ensemble_rank(lists, None, lam, k_out=lists[0].size))
    return out


def refresh_p_minus(pi_d_rows, size: int) -> list:
    """Heads of the current target rankings; truncation is logged."""
    out = []
    short = 0
    for row in pi_d_rows:
        if len(row) < size:
            short += 1
        out.append(np.asarray(row[:size], dtype=np.int64))
    if short:
        log.info("refresh_p_minus: %d target lists shorter than %d", short, size)
    return out


def sample_negatives(dataset, u: int, exclude, size: int, rng) -> np.ndarray:
    """Uniform sample without replacement from the user's unobserved items
    minus `exclude`; exhausted pools return everything, shuffled."""
    observed = dataset.observed_matrix()
    mask = ~observed[u]
    exclude = np.asarray(list(exclude) if isinstance(exclude, set) else exclude,
                         dtype=np.int64)
    if exclude.size:
        mask[exclude] = False
    pool = np.flatnonzero(mask)
    return _sample_pool(pool, size, rng)


def _sample_pool(pool: np.ndarray, size: int, rng) -> np.ndarray:
    if pool.size == 0:
        raise ValueError("empty negative pool")
    if pool.size <= size:
        return pool[rng.permutation(pool.size)]
    return pool[rng.choice(pool.size, size=size, replace=False)]


# ---------------------------------------------------------------------------
# score gathering / gradient application per model kind

def _user_scores(model, u, items):
    return score_items(model, u, items)


def _apply_updates(model, batch_entries, lr, reg):
    """SGD update from a batch of (user, items, score-gradients).

    User vectors update immediately; item-vector rows accumulate into one
    scatter-add per batch. Touched parameters carry the L2 term. ML models
    are projected back onto the unit ball afterwards.
    """
    flat_items = []
    flat_rows = []
    dense_grads = None
    for u, items, g, cache in batch_entries:
        p = model.user_vecs[u]
        if model.kind == "mf":
            gu = model.item_vecs[items].T @ g + 2.0 * reg * p
            rows = g[:, None] * p[None, :] + 2.0 * reg * model.item_vecs[items]
        elif model.kind == "ml":
            diff = p[None, :] - model.item_vecs[items]
            gu = -2.0 * (diff * g[:, None]).sum(axis=0) + 2.0 * reg * p
            rows = 2.0 * diff * g[:, None] + 2.0 * reg * model.item_vecs[items]
        else:
            x, z1, h1, z2, h2 = cache
            d = model.dense
            dh2 = g[:, None] * d["w3"][None, :]
            dz2 = dh2 * (z2 > 0)
            dh1 = dz2 @ d["W2"].T
            dz1 = dh1 * (z1 > 0)
            dx = dz1 @ d["W1"].T
            gu = dx[:, :model.dim].sum(axis=0) + 2.0 * reg * p
            rows = dx[:, model.dim:] + 2.0 * reg * model.item_vecs[items]
            if dense_grads is None:
                dense_grads = {k: np.zeros_like(v) for k, v in d.items()}
            dense_grads["w3"] += h2.T @ g
            dense_grads["b3"][0] += g.sum()
            dense_grads["W2"] += h1.T @ dz2
            dense_grads["b2"] += dz2.sum(axis=0)
            dense_grads["W1"] += x.T @ dz1
            dense_grads["b1"] += dz1.sum(axis=0)
        if not np.isfinite(gu).all() or not np.isfinite(rows).all():
            raise RuntimeError(f"non-finite distillation gradient for user {u}")
        model.user_vecs[u] -= lr * gu
        flat_items.append(items)
        flat_rows.append(rows)
    all_items = np.concatenate(flat_items)
    np.add.at(model.item_vecs, all_items, -lr * np.concatenate(flat_rows))
    if dense_grads is not None:
        for name, gmat in dense_grads.items():
            model.dense[name] -= lr * gmat
    if model.kind == "ml":
        touched_users = np.array([e[0] for e in batch_entries], dtype=np.int64)
        _project(model.user_vecs, touched_users)
        _project(model.item_vecs, all_items)


def _project(mat, rows):
    rows = np.unique(rows)
    norms = np.linalg.norm(mat[rows], axis=1)
    over = norms > 1.0
    if over.any():
        mat[rows[over]] /= norms[over][:, None]


def _forward_cache(model, u, items):
    """Scores plus the backward cache (dnn only)."""
    if model.kind != "dnn":
        return _user_scores(model, u, items), None
    from .models import _dnn_forward
    q = model.item_vecs[items]
    p = np.broadcast_to(model.user_vecs[u], q.shape)
    s, cache = _dnn_forward(model, p, q, want_cache=True)
    return s, cache


def _user_gradient(model, u, p_plus_u, p_minus_u, negatives, fine: bool,
                   structure: str, use_pplus: bool):
    """Score gradients for one user's step; returns (items, grads, loss, cache)."""
    grad_of = grad_fine if fine else grad_overall
    loss_of = loss_fine if fine else loss_overall

    if use_pplus and structure == "merged":
        p_all = np.concatenate([p_plus_u, p_minus_u])
        items = np.concatenate([p_all, negatives])
        scores, cache = _forward_cache(model, u, items)
        sl = ScoredLists(scores[:p_all.size], scores[p_all.size:])
        gp, gn = grad_of(sl)
        scale = 1.0 / p_all.size
        return items, np.concatenate([gp, gn]) * scale, loss_of(sl) * scale, cache

    if use_pplus and structure == "stacked":
        items = np.concatenate([p_plus_u, p_minus_u, negatives])
        scores, cache = _forward_cache(model, u, items)
        np_, nm = p_plus_u.size, p_minus_u.size
        s_plus = ScoredLists(scores[:np_], scores[np_:])
        s_minus = ScoredLists(scores[np_:np_ + nm], scores[np_ + nm:])
        gp1, gn1 = grad_of(s_plus)
        gp2, gn2 = grad_of(s_minus)
        a, b = 1.0 / np_, 1.0 / nm
        g = np.concatenate([gp1 * a,
                            gn1[:nm] * a + gp2 * b,
                            gn1[nm:] * a + gn2 * b])
        loss = loss_of(s_plus) * a + loss_of(s_minus) * b
        return items, g, loss, cache

    if use_pplus:
        items = np.concatenate([p_plus_u, p_minus_u, negatives])
        scores, cache = _forward_cache(model, u, items)
        np_, nm = p_plus_u.size, p_minus_u.size
        s_n = scores[np_ + nm:]
        s_plus = ScoredLists(scores[:np_], s_n)
        s_minus = ScoredLists(scores[np_:np_ + nm], s_n)
        gp1, gn1 = grad_of(s_plus)
        gp2, gn2 = grad_of(s_minus)
        a, b = 1.0 / np_, 1.0 / nm
        g = np.concatenate([gp1 * a, gp2 * b, gn1 * a + gn2 * b])
        loss = loss_of(s_plus) * a + loss_of(s_minus) * b
        return items, g, loss, cache

    items = np.concatenate([p_minus_u, negatives])
    scores, cache = _forward_cache(model, u, items)
    sl = ScoredLists(scores[:p_minus_u.size], scores[p_minus_u.size:])
    gp, gn = grad_of(sl)
    scale = 1.0 / p_minus_u.size
    return items, np.concatenate([gp, gn]) * scale, loss_of(sl) * scale, cache


# ---------------------------------------------------------------------------
# the training procedure

def _variant_flags(variant: str):
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    use_dkc = variant not in ("no_dkc", "rrd")
    use_ado = variant not in ("no_ado", "rrd")
    use_pplus = variant not in ("no_pplus", "rrd")
    structure = {"merged_pd": "merged", "stacked": "stacked"}.get(variant, "split")
    return use_dkc, use_ado, use_pplus, structure


def _check_compatible(trajectories, dataset, cfg: TrainConfig):
    problems = []
    for x, traj in enumerate(trajectories):
        if traj.num_users != dataset.num_users:
            problems.append(f"teacher {x} ({traj.kind}): {traj.num_users} users "
                            f"vs dataset {dataset.num_users}")
        if traj.e_states != cfg.e_states:
            problems.append(f"teacher {x} ({traj.kind}): E={traj.e_states} "
                            f"vs config E={cfg.e_states}")
        if traj.k < cfg.k_dkc or traj.k < cfg.p_minus_size:
            problems.append(f"teacher {x} ({traj.kind}): stored K={traj.k} below "
                            f"k_dkc={cfg.k_dkc} / p_minus={cfg.p_minus_size}")
    if not problems:
        mism = 0
        example = None
        for u in range(dataset.num_users):
            want = np.sort(dataset.train_items[u])
            for x, traj in enumerate(trajectories):
                if not np.array_equal(np.sort(traj.obs_items[u]), want):
                    mism += 1
                    example = example or f"user {u}, teacher {x}"
        if mism:
            problems.append(f"observed-item rankings disagree with the dataset "
                            f"for {mism} (user, teacher) pairs (first: {example})")
    if problems:
        raise ValueError("trajectory/dataset mismatch:\n  " + "\n  ".join(problems))


def train_student(student: EmbeddingModel, trajectories, dataset,
                  cfg: TrainConfig, variant: str = "full"):
    """Run the distillation procedure; returns (student, TrainLog).

    The returned model is the best-validation (R@10) checkpoint among
    epochs where every user had already reached the final targets; early
    stopping only engages in that regime, since earlier validation scores
    are measured against moving targets.
    """
    use_dkc, use_ado, use_pplus, structure = _variant_flags(variant)
    _check_compatible(trajectories, dataset, cfg)
    return _train_core(student, dataset, cfg, trajectories=trajectories,
                       fixed_target=None, use_dkc=use_dkc, use_ado=use_ado,
                       use_pplus=use_pplus, structure=structure,
                       early_stop=True)


def distill_ablation(variant: str, student: EmbeddingModel, trajectories,
                     dataset, cfg: TrainConfig):
    """Alias for the ablation grid; `full` is exactly `train_student`."""
    return train_student(student, trajectories, dataset, cfg, variant=variant)


def train_fixed_target(student: EmbeddingModel, target_rows, dataset,
                       cfg: TrainConfig, early_stop: bool = False):
    """Plain fixed-target listwise distillation (the study / baseline mode):
    no curriculum, no observed-item term, fine-grained loss throughout."""
    target_rows = np.asarray(target_rows, dtype=np.int64)
    return _train_core(student, dataset, cfg, trajectories=None,
                       fixed_target=target_rows, use_dkc=False, use_ado=False,
                       use_pplus=False, structure="split",
                       early_stop=early_stop)


def _train_core(student, dataset, cfg, trajectories, fixed_target, use_dkc,
                use_ado, use_pplus, structure, early_stop):
    num_users, num_items = dataset.num_users, dataset.num_items
    params = RelevanceParams(cfg.lam, cfg.k_dkc)
    rng = np.random.default_rng(cfg.seed)
    k_pi = max(cfg.k_dkc, cfg.p_minus_size)
    log_out = TrainLog()

    if trajectories is not None:
        m_teachers = len(trajectories)
        e_states = trajectories[0].e_states
        reference = final_ensemble(trajectories, cfg.lam, k_pi)
    else:
        m_teachers = 0
        e_states = 1
        if fixed_target.shape[1] < cfg.p_minus_size:
            log.info("fixed target lists shorter than |P-|=%d; using length %d",
                     cfg.p_minus_size, fixed_target.shape[1])
        reference = fixed_target

    ref_lookup = {k: rank_lookup_rows(reference, num_items,
                                      min(k, reference.shape[1]))
                  for k in (10, 50)}

    state = init_selection_state(num_users, max(m_teachers, 1), e_states,
                                 cfg.alpha0)
    curriculum_active = use_dkc and trajectories is not None and e_states > 1
    if not curriculum_active:
        state.v[:] = e_states

    # initial targets and frozen references
    if curriculum_active:
        student_pi = rank_topk_all(student, dataset.train_items, k_pi)
        everyone = np.arange(num_users)
        state.ref_disc = np.nan_to_num(
            next_checkpoint_discrepancy(state, student_pi, trajectories,
                                        params, num_items, everyone))
        targets = np.empty((num_users, k_pi), dtype=np.int64)
        for u in range(num_users):
            targets[u] = ensemble_rank([t.items[0, u] for t in trajectories],
                                       [t.stds[0, u] for t in trajectories],
                                       cfg.lam, k_pi)
        log_out.v_snapshots.append((0, state.v.copy()))
    else:
        targets = reference.copy()

    p_plus = build_p_plus(trajectories, dataset, cfg.lam) if use_pplus else None
    p_minus = refresh_p_minus(targets, cfg.p_minus_size)
    observed = dataset.observed_matrix()
    pools = _negative_pools(observed, p_minus, np.arange(num_users))

    has_valid = np.array([len(dataset.valid_items[u]) > 0
                          for u in range(num_users)])
    best_model = None
    best_val = -np.inf
    best_epoch = 0
    epochs_done = 0

    for epoch in range(1, cfg.max_epochs + 1):
        if curriculum_active and epoch % cfg.period == 0:
            if not converged_mask(state).all():
                student_pi = rank_topk_all(student, dataset.train_items, k_pi)
                state, new_targets, _ = dkc_update(
                    state, student_pi, trajectories, params, num_items,
                    users=None, k_out=k_pi)
                if new_targets:
                    changed = np.fromiter(new_targets, dtype=np.int64)
                    for u, row in new_targets.items():
                        targets[u] = row
                        p_minus[u] = row[:cfg.p_minus_size]
                    pools_new = _negative_pools(observed, p_minus, changed)
                    pools.update(pools_new)
                log_out.v_snapshots.append((epoch, state.v.copy()))
            anneal_alpha(state, cfg.anneal)

        conv = converged_mask(state)
        fine_mask = np.ones(num_users, dtype=bool) if not use_ado else conv.copy()
        log_out.fine_mask_history.append(fine_mask)
        log_out.converged_history.append(conv.copy())

        epoch_loss = 0.0
        order = rng.permutation(num_users)
        for lo in range(0, num_users, cfg.batch_users):
            batch = order[lo:lo + cfg.batch_users]
            entries = []
            for u in batch:
                negatives = _sample_pool(pools[int(u)], cfg.n_sample_size, rng)
                items, g, loss_u, cache = _user_gradient(
                    student, int(u),
                    p_plus[int(u)] if use_pplus else None,
                    p_minus[int(u)], negatives, bool(fine_mask[u]),
                    structure, use_pplus)
                entries.append((int(u), items, g, cache))
                epoch_loss += loss_u
            _apply_updates(student, entries, cfg.lr, cfg.reg)

        student_topk = rank_topk_all(student, dataset.train_items, k_pi)
        d10 = float(np.mean(discrepancy_rows(
            student_topk, ref_lookup[10], RelevanceParams(cfg.lam, min(10, reference.shape[1])))))
        d50 = float(np.mean(discrepancy_rows(
            student_topk, ref_lookup[50], RelevanceParams(cfg.lam, min(50, reference.shape[1])))))
        r10, n10 = _split_metrics(student_topk, dataset.valid_items, has_valid, 10)
        log_out.add_row({
            "epoch": epoch, "D@10": d10, "D@50": d50, "R@10_valid": r10,
            "N@10_valid": n10, "mean_v": float(state.v.mean()) if m_teachers else 0.0,
            "alpha": state.alpha, "loss": epoch_loss / num_users,
            "mode_frac_fine": float(fine_mask.mean()),
        })
        epochs_done = epoch

        if conv.all():
            if r10 > best_val:
                best_val = r10
                best_epoch = epoch
                best_model = student.copy()
            elif early_stop and epoch - best_epoch >= cfg.patience:
                break

    if best_model is None:
        best_model = student.copy()
        best_epoch = epochs_done
        if cfg.max_epochs > 0 and curriculum_active:
            log.warning("curriculum did not converge for every user within "
                        "%d epochs", cfg.max_epochs)
    log_out.best_epoch = best_epoch
    log_out.epochs_run = epochs_done
    log_out.final_state = state
    return best_model, log_out


def _negative_pools(observed, p_minus, users):
    pools = {}
    for u in users:
        mask = ~observed[u]
        mask[p_minus[int(u)]] = False
        pools[int(u)] = np.flatnonzero(mask)
    return pools


def _split_metrics(topk_rows, held_lists, has_items, k):
    recalls, ndcgs = [], []
    for u in np.flatnonzero(has_items):
        recalls.append(recall_at_k(topk_rows[u], held_lists[u], k))
        ndcgs.append(ndcg_eval(topk_rows[u], held_lists[u], k))
    if not recalls:
        return 0.0, 0.0
    return float(np.mean(recalls)), float(np.mean(ndcgs))


# ---------------------------------------------------------------------------
# evaluation helpers shared by the CLI and tests

def eval_split(topk_rows, dataset, split: str = "test", ks=(10, 50)):
    """Mean Recall@K / NDCG@K over users with a nonempty held-out set."""
    held = {"valid": dataset.valid_items, "test": dataset.test_items}[split]
    users = [u for u in range(dataset.num_users) if len(held[u])]
    out = {}
    for k in ks:
        out[("recall", k)] = float(np.mean([recall_at_k(topk_rows[u], held[u], k)
                                            for u in users]))
        out[("ndcg", k)] = float(np.mean([ndcg_eval(topk_rows[u], held[u], k)
                                          for u in users]))
    return out, len(users)


def eval_discrepancy(topk_rows, target_rows, lam: float = 10.0, ks=(10, 50)):
    """Mean D@K of per-user rankings against per-user reference rankings."""
    topk_rows = np.asarray(topk_rows)
    target_rows = np.asarray(target_rows)
    num_items = int(max(topk_rows.max(), target_rows.max())) + 1
    out = {}
    for k in ks:
        params = RelevanceParams(lam, k)
        lookup = rank_lookup_rows(target_rows, num_items, k)
        out[("d", k)] = float(np.mean(discrepancy_rows(topk_rows, lookup, params)))
    return out


def eval_nll(model, dataset, target_rows, p_size: int = 50,
             n_size: int = 50, seed: int = 0) -> float:
    """Mean per-user fine-loss (scaled by 1/|P|) against a target ranking,
    with seeded negatives drawn outside observed ∪ P."""
    rng = np.random.default_rng([seed, 0xD15C])
    observed = dataset.observed_matrix()
    vals = []
    for u in range(dataset.num_users):
        p_items = np.asarray(target_rows[u][:p_size], dtype=np.int64)
        mask = ~observed[u]
        mask[p_items] = False
        pool = np.flatnonzero(mask)
        negs = _sample_pool(pool, n_size, rng)
        s_p = score_items(model, u, p_items)
        s_n = score_items(model, u, negs)
        vals.append(loss_fine(ScoredLists(s_p, s_n)) / p_items.size)
    return float(np.mean(vals))
