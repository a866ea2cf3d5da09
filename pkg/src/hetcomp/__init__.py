"""Ranking distillation from heterogeneous teacher trajectories.

The pipeline: `data` prepares implicit-feedback splits, `models` trains
embedding teachers (and students), `distill.record_trajectory` checkpoints
a teacher's per-user rankings over its own training, and
`distill.train_student` replays those trajectories as an easy-to-hard
curriculum into a compact student. `metrics`, `losses`, `ensemble`, and
`curriculum` hold the underlying primitives; `cli` wires everything into
the `hetcomp` command.
"""

from .curriculum import (SelectionState, TeacherTrajectory, all_converged,
                         anneal_alpha, discrepancy_ratio, dkc_update,
                         final_ensemble, init_selection_state)
from .data import (InteractionDataset, kcore_filter, load_dataset,
                   load_interactions, save_dataset, split)
from .distill import (DistillTargets, TrainConfig, TrainLog, build_p_plus,
                      checkpoint_epochs, distill_ablation, eval_discrepancy,
                      eval_nll, eval_split, load_trajectory, record_trajectory,
                      refresh_p_minus, sample_negatives, save_trajectory,
                      train_fixed_target, train_student)
from .ensemble import ensemble_rank, importance, rank_std
from .losses import (ScoredLists, grad_fine, grad_overall, hetcomp_loss,
                     loss_fine, loss_overall)
from .metrics import (RelevanceParams, as_ranked_list, dcg_at_k, discrepancy,
                      ndcg_eval, recall_at_k, relevance)
from .models import (EmbeddingModel, TeacherConfig, bpr_step, hinge_step,
                     init_model, load_model, mlp_step, rank_topk,
                     rank_topk_all, save_model, score, train_teacher)
from .synthetic import generate_interactions, write_interactions

__version__ = "0.1.0"

__all__ = [
    "EmbeddingModel", "InteractionDataset", "RelevanceParams", "ScoredLists",
    "SelectionState", "TeacherConfig", "TeacherTrajectory", "TrainConfig",
    "TrainLog", "DistillTargets",
    "all_converged", "anneal_alpha", "as_ranked_list", "bpr_step",
    "build_p_plus", "checkpoint_epochs", "dcg_at_k", "discrepancy",
    "discrepancy_ratio", "distill_ablation", "dkc_update", "ensemble_rank",
    "eval_discrepancy", "eval_nll", "eval_split", "final_ensemble",
    "generate_interactions", "grad_fine", "grad_overall", "hetcomp_loss",
    "hinge_step", "importance", "init_model", "init_selection_state",
    "kcore_filter", "load_dataset", "load_interactions", "load_model",
    "load_trajectory", "loss_fine", "loss_overall", "mlp_step", "ndcg_eval",
    "rank_std", "rank_topk", "rank_topk_all", "recall_at_k",
    "record_trajectory", "refresh_p_minus", "relevance", "sample_negatives",
    "save_dataset", "save_model", "save_trajectory", "score", "split",
    "train_fixed_target", "train_student", "train_teacher",
    "write_interactions",
]
