"""Dynamic knowledge construction: the per-user, per-teacher curriculum.

Each teacher contributes a trajectory of E checkpointed top-K rankings per
user (checkpoint 1 earliest, E converged). A selection state tracks which
checkpoint currently supervises each (user, teacher) slot. The student
advances a slot when its discrepancy to the *next* checkpoint has shrunk
enough relative to the frozen reference measured when the current
checkpoint was adopted:

    ratio = ref / current > alpha  ->  advance.

Advancement is monotone; a slot at the final checkpoint never moves. After
the per-slot updates, the per-user target is rebuilt by consistency-
weighted ensembling of the selected checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ensemble import ensemble_rank
from .metrics import RelevanceParams, discrepancy_rows, rank_lookup_rows

DISC_FLOOR = 1e-12


@dataclass
class TeacherTrajectory:
    """Checkpointed rankings of one teacher over its own training run.

    items[e, u] is user u's stored top-K unobserved ranking at checkpoint
    e+1 (checkpoints are 1-based outside array indexing); stds aligns
    rank-consistency values with those positions. obs_items holds the
    converged full ranking of each user's observed items.
    """

    kind: str
    e_states: int
    k: int
    num_users: int
    items: np.ndarray            # (E, num_users, K) int
    stds: np.ndarray             # (E, num_users, K) float
    obs_items: list              # per user: np.ndarray, converged order

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.int64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        expect = (self.e_states, self.num_users, self.k)
        if self.items.shape != expect or self.stds.shape != expect:
            raise ValueError(
                f"trajectory arrays must have shape {expect}, got "
                f"{self.items.shape} / {self.stds.shape}"
            )
        if self.e_states < 1:
            raise ValueError("a trajectory needs at least one checkpoint")


@dataclass
class SelectionState:
    """Curriculum position per (user, teacher).

    v holds the selected checkpoint (1..E, never decreasing); ref_disc the
    discrepancy to the next checkpoint frozen when v last advanced; alpha
    the advancement threshold, annealed over time.
    """

    v: np.ndarray                # (num_users, M) int
    ref_disc: np.ndarray         # (num_users, M) float
    alpha: float
    e_states: int
    epoch_of_last_update: int = 0


def init_selection_state(num_users: int, num_teachers: int, e_states: int,
                         alpha0: float = 1.05) -> SelectionState:
    return SelectionState(
        v=np.ones((num_users, num_teachers), dtype=np.int64),
        ref_disc=np.zeros((num_users, num_teachers)),
        alpha=alpha0,
        e_states=e_states,
    )


def discrepancy_ratio(ref: float, current: float) -> float:
    """ref / current with the denominator clamped at 1e-12."""
    return ref / max(current, DISC_FLOOR)


def anneal_alpha(state: SelectionState, factor: float = 0.995) -> SelectionState:
    """Multiply the advancement threshold once per update period."""
    state.alpha *= factor
    return state


def all_converged(state: SelectionState, u: int) -> bool:
    """True once every teacher slot of user u selects the final checkpoint."""
    return bool(np.all(state.v[u] == state.e_states))


def converged_mask(state: SelectionState) -> np.ndarray:
    return np.all(state.v == state.e_states, axis=1)


def next_checkpoint_discrepancy(state: SelectionState, student_pi: np.ndarray,
                                trajectories, params: RelevanceParams,
                                num_items: int, users: np.ndarray) -> np.ndarray:
    """D@K of each user's student list to each teacher's next checkpoint.

    Slots already at the final checkpoint get NaN. Used both to freeze
    initial references and inside `dkc_update`.
    """
    out = np.full((users.size, len(trajectories)), np.nan)
    for x, traj in enumerate(trajectories):
        vx = state.v[users, x]
        movable = vx < traj.e_states
        for e_next in np.unique(vx[movable] + 1):
            sel = movable & (vx + 1 == e_next)
            rows = users[sel]
            lookup = rank_lookup_rows(traj.items[e_next - 1][rows], num_items, params.k)
            out[sel, x] = discrepancy_rows(student_pi[rows], lookup, params)
    return out


def dkc_update(state: SelectionState, student_pi: np.ndarray, trajectories,
               params: RelevanceParams, num_items: int, users=None,
               k_out: int = 50):
    """One curriculum update pass; returns (state, targets, advanced).

    Args:
      student_pi: (num_users, >=K) current student top rankings.
      trajectories: list of TeacherTrajectory, all with the same E.
      users: user ids to process (defaults to every non-converged user;
        converged users have nothing to update).
      k_out: length of the rebuilt ensemble targets.

    targets maps user id -> rebuilt target ranking; advanced is the
    boolean (len(users), M) advancement matrix.
    """
    if users is None:
        users = np.flatnonzero(~converged_mask(state))
    users = np.asarray(users, dtype=np.int64)
    if users.size == 0:
        return state, {}, np.zeros((0, len(trajectories)), dtype=bool)

    current = next_checkpoint_discrepancy(state, student_pi, trajectories,
                                          params, num_items, users)
    ref = state.ref_disc[users]
    with np.errstate(invalid="ignore"):
        ratio = ref / np.maximum(current, DISC_FLOOR)
    advanced = np.nan_to_num(ratio, nan=-np.inf) > state.alpha

    for x, traj in enumerate(trajectories):
        moved = users[advanced[:, x]]
        if moved.size == 0:
            continue
        state.v[moved, x] += 1
        # re-freeze the reference against the new next checkpoint (the
        # final checkpoint compares against itself and is never read again)
        e_ref = np.minimum(state.v[moved, x] + 1, traj.e_states)
        for e in np.unique(e_ref):
            rows = moved[e_ref == e]
            lookup = rank_lookup_rows(traj.items[e - 1][rows], num_items, params.k)
            state.ref_disc[rows, x] = discrepancy_rows(student_pi[rows], lookup, params)

    targets = {}
    for idx, u in enumerate(users):
        selected = [traj.items[state.v[u, x] - 1, u] for x, traj in enumerate(trajectories)]
        stds = [traj.stds[state.v[u, x] - 1, u] for x, traj in enumerate(trajectories)]
        targets[int(u)] = ensemble_rank(selected, stds, params.lam, k_out)
    return state, targets, advanced


def final_ensemble(trajectories, lam: float, k_out: int) -> np.ndarray:
    """Per-user ensemble of every teacher's converged checkpoint."""
    num_users = trajectories[0].num_users
    out = np.empty((num_users, k_out), dtype=np.int64)
    for u in range(num_users):
        selected = [traj.items[-1, u] for traj in trajectories]
        stds = [traj.stds[-1, u] for traj in trajectories]
        row = ensemble_rank(selected, stds, lam, k_out)
        if row.size < k_out:
            raise ValueError(
                f"user {u}: ensemble union {row.size} is smaller than k_out={k_out}"
            )
        out[u] = row
    return out
