"""Command-line pipeline: data prep, teacher training with trajectory
recording, distillation, evaluation, and the two analysis studies.

Configuration precedence is flag > config file (key=value lines) > built-in
default. All randomness flows from --seed. Every command writes a
run_manifest.txt (command, resolved config, input digests, outputs, wall
time) next to its primary outputs; primary outputs are byte-identical
across reruns with identical inputs and seed.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import data as data_mod
from . import distill as distill_mod
from .curriculum import final_ensemble
from .distill import TrainConfig, load_trajectory, record_trajectory, save_trajectory
from .metrics import ndcg_eval, recall_at_k
from .models import TeacherConfig, init_model, load_model, rank_topk_all, save_model

log = logging.getLogger(__name__)

STUDY_EPOCHS_DEFAULT = 80


# ---------------------------------------------------------------------------
# config handling

def _read_config(path) -> dict:
    cfg = {}
    if path is None:
        return cfg
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}: line {lineno}: expected key=value")
            key, _, value = line.partition("=")
            cfg[key.strip()] = value.strip()
    return cfg


def _resolve(args, key, default, cast=None):
    """Flag > config file > default."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    cfg = getattr(args, "_config", {})
    if key in cfg:
        raw = cfg[key]
        return cast(raw) if cast else raw
    return default


def _data_dir(args):
    path = _resolve(args, "data", os.environ.get("HETCOMP_DATA_DIR"))
    if path is None:
        raise ValueError("no dataset: pass --data or set HETCOMP_DATA_DIR")
    return path


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, command, config, inputs, outputs, started):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"command={command}\n")
        for key in sorted(config):
            fh.write(f"{key}={config[key]}\n")
        for path in inputs:
            fh.write(f"input={path} sha256={_digest(path)}\n")
        for path in outputs:
            fh.write(f"output={path}\n")
        fh.write(f"duration_s={time.monotonic() - started:.3f}\n")


def _write_report(rows, header, out_dir, name):
    """Machine-readable TSV plus an aligned plain-text twin."""
    os.makedirs(out_dir, exist_ok=True)
    tsv = os.path.join(out_dir, f"{name}.tsv")
    txt = os.path.join(out_dir, f"{name}.txt")
    str_rows = [[str(c) for c in row] for row in rows]
    with open(tsv, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in str_rows:
            fh.write("\t".join(row) + "\n")
    widths = [max(len(h), *(len(r[i]) for r in str_rows)) if str_rows else len(h)
              for i, h in enumerate(header)]
    with open(txt, "w", encoding="utf-8") as fh:
        fh.write("  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip() + "\n")
        for row in str_rows:
            fh.write("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() + "\n")
    return [tsv, txt]


# ---------------------------------------------------------------------------
# commands

def cmd_prepare(args) -> int:
    started = time.monotonic()
    ratios = tuple(float(r) for r in _resolve(args, "ratios", "0.8,0.1,0.1").split(","))
    kcore = _resolve(args, "kcore", 10, int)
    seed = _resolve(args, "seed", 0, int)
    pairs = data_mod.load_interactions(args.input, fmt=_resolve(args, "fmt", "whitespace"))
    surviving = data_mod.kcore_filter(pairs, kcore)
    if not surviving:
        raise ValueError(f"nothing survives {kcore}-core filtering")
    ds = data_mod.split(surviving, ratios, seed)
    data_mod.save_dataset(ds, args.out)
    outputs = [os.path.join(args.out, n) for n in
               ("manifest.txt", "train.txt", "valid.txt", "test.txt",
                "users.txt", "items.txt")]
    _write_manifest(args.out, "prepare",
                    {"kcore": kcore, "ratios": ",".join(map(str, ratios)),
                     "seed": seed},
                    [args.input], outputs, started)
    print(f"prepared dataset: {ds.num_users} users, {ds.num_items} items, "
          f"{ds.n_interactions()} train/valid/test interactions "
          f"({ds.dropped_users} users dropped)")
    return 0


def cmd_train_teacher(args) -> int:
    started = time.monotonic()
    data_dir = _data_dir(args)
    ds = data_mod.load_dataset(data_dir)
    kind = args.kind
    dim = _resolve(args, "dim", 64, int)
    e_states = _resolve(args, "E", 4, int)
    k = _resolve(args, "K", 50, int)
    seed = _resolve(args, "seed", 0, int)
    cfg = TeacherConfig(
        lr=_resolve(args, "lr", TeacherConfig.lr, float),
        reg=_resolve(args, "reg", TeacherConfig.reg, float),
        margin=_resolve(args, "margin", TeacherConfig.margin, float),
        max_epochs=_resolve(args, "max_epochs", TeacherConfig.max_epochs, int),
        patience=_resolve(args, "patience", TeacherConfig.patience, int),
        seed=seed,
    )
    traj, fit = record_trajectory(kind, ds, dim, e_states, k, cfg,
                                  consistency_mode=_resolve(
                                      args, "consistency", "per_checkpoint"))
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, f"teacher-{kind}.ckpt")
    traj_path = os.path.join(args.out, f"teacher-{kind}.traj")
    save_model(fit.model, ckpt)
    save_trajectory(traj, traj_path)
    _write_manifest(args.out, "train-teacher",
                    {"kind": kind, "dim": dim, "E": e_states, "K": k,
                     "seed": seed, "lr": cfg.lr, "reg": cfg.reg,
                     "margin": cfg.margin, "max_epochs": cfg.max_epochs,
                     "patience": cfg.patience},
                    [os.path.join(data_dir, "manifest.txt")],
                    [ckpt, traj_path], started)
    print(f"teacher {kind}: converged at epoch {fit.best_epoch} "
          f"(ran {fit.epochs_run}), best valid R@{cfg.eval_k} = "
          f"{max(fit.val_history):.4f}" if fit.val_history else "")
    return 0


def _train_config_from_args(args) -> TrainConfig:
    return TrainConfig(
        period=_resolve(args, "period", 10, int),
        alpha0=_resolve(args, "alpha0", 1.05, float),
        anneal=_resolve(args, "anneal", 0.995, float),
        lam=_resolve(args, "lam", 10.0, float),
        k_dkc=_resolve(args, "k_dkc", 50, int),
        e_states=_resolve(args, "E", 4, int),
        p_minus_size=_resolve(args, "p_minus", 50, int),
        n_sample_size=_resolve(args, "n_sample", 50, int),
        lr=_resolve(args, "lr", 0.1, float),
        reg=_resolve(args, "reg", 1e-4, float),
        max_epochs=_resolve(args, "max_epochs", 300, int),
        patience=_resolve(args, "patience", 10, int),
        seed=_resolve(args, "seed", 0, int),
        batch_users=_resolve(args, "batch_users", 256, int),
    )


def cmd_distill(args) -> int:
    started = time.monotonic()
    data_dir = _data_dir(args)
    ds = data_mod.load_dataset(data_dir)
    trajectories = [load_trajectory(p) for p in args.trajectories]
    cfg = _train_config_from_args(args)
    cfg.e_states = trajectories[0].e_states
    student = init_model(_resolve(args, "student_kind", "mf"), ds.num_users,
                         ds.num_items, _resolve(args, "student_dim", 6, int),
                         cfg.seed)
    student, train_log = distill_mod.train_student(student, trajectories, ds,
                                                   cfg, variant=args.variant)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "student.ckpt")
    log_path = os.path.join(args.out, "train_log.tsv")
    sel_path = os.path.join(args.out, "selection_state.tsv")
    save_model(student, ckpt)
    train_log.to_tsv(log_path)
    _dump_selection(train_log.final_state, sel_path)
    _write_manifest(args.out, "distill",
                    {"variant": args.variant, "seed": cfg.seed, "lr": cfg.lr,
                     "reg": cfg.reg, "period": cfg.period, "alpha0": cfg.alpha0,
                     "anneal": cfg.anneal, "lam": cfg.lam, "k_dkc": cfg.k_dkc,
                     "p_minus": cfg.p_minus_size, "n_sample": cfg.n_sample_size,
                     "max_epochs": cfg.max_epochs, "patience": cfg.patience,
                     "batch_users": cfg.batch_users,
                     "student_dim": student.dim, "student_kind": student.kind},
                    list(args.trajectories) + [os.path.join(data_dir, "manifest.txt")],
                    [ckpt, log_path, sel_path], started)
    print(f"distilled ({args.variant}): {train_log.epochs_run} epochs, "
          f"best epoch {train_log.best_epoch}")
    return 0


def _dump_selection(state, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"alpha\t{state.alpha!r}\n")
        fh.write("user\tteacher\tv\td\n")
        for u in range(state.v.shape[0]):
            for x in range(state.v.shape[1]):
                fh.write(f"{u}\t{x}\t{int(state.v[u, x])}\t{state.ref_disc[u, x]!r}\n")


def cmd_evaluate(args) -> int:
    started = time.monotonic()
    data_dir = _data_dir(args)
    ds = data_mod.load_dataset(data_dir)
    model = load_model(args.model)
    workers = _resolve(args, "workers", 1, int)
    seed = _resolve(args, "seed", 0, int)
    k_pi = 50
    topk = rank_topk_all(model, ds.train_items, k_pi)
    rows = []
    inputs = [args.model, os.path.join(data_dir, "manifest.txt")]
    if args.against == "testset":
        users = [u for u in range(ds.num_users) if len(ds.test_items[u])]
        for k in (10, 50):
            rec = _parallel_mean(
                lambda u, k=k: recall_at_k(topk[u], ds.test_items[u], k), users, workers)
            nd = _parallel_mean(
                lambda u, k=k: ndcg_eval(topk[u], ds.test_items[u], k), users, workers)
            rows.append(("recall", k, f"{rec:.6f}", len(users)))
            rows.append(("ndcg", k, f"{nd:.6f}", len(users)))
    else:
        if not args.trajectories:
            raise ValueError("--against trajectory-final-ensemble needs --trajectories")
        trajectories = [load_trajectory(p) for p in args.trajectories]
        inputs += list(args.trajectories)
        target = final_ensemble(trajectories, 10.0, k_pi)
        disc = distill_mod.eval_discrepancy(topk, target, lam=10.0, ks=(10, 50))
        for k in (10, 50):
            rows.append(("d", k, f"{disc[('d', k)]:.6f}", ds.num_users))
        nll = distill_mod.eval_nll(model, ds, target, p_size=k_pi, seed=seed)
        rows.append(("nll", k_pi, f"{nll:.6f}", ds.num_users))
    outputs = _write_report(rows, ("metric", "K", "value", "n_users"),
                            args.out, "evaluation")
    _write_manifest(args.out, "evaluate",
                    {"against": args.against, "model": args.model, "seed": seed,
                     "workers": workers},
                    inputs, outputs, started)
    for row in rows:
        print("\t".join(str(c) for c in row))
    return 0


def _parallel_mean(fn, users, workers):
    if workers <= 1:
        vals = [fn(u) for u in users]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            vals = list(pool.map(fn, users))
    return float(np.mean(vals)) if vals else 0.0


def unpopular_items(ds, fraction: float = 0.3) -> np.ndarray:
    """Boolean mask of the lowest-`fraction` items by train interaction count
    (ties by ascending item id)."""
    counts = np.bincount(np.concatenate(ds.train_items).astype(np.int64)
                         if ds.num_users else np.array([], dtype=np.int64),
                         minlength=ds.num_items)
    order = np.lexsort((np.arange(ds.num_items), counts))
    mask = np.zeros(ds.num_items, dtype=bool)
    mask[order[:int(fraction * ds.num_items)]] = True
    return mask


def trajectory_diversity(traj, unpop_mask) -> list:
    """Per checkpoint: unique items in the stored top-K lists and how many
    of them are unpopular; ratios are relative to the final checkpoint."""
    uniq = [np.unique(traj.items[e]) for e in range(traj.e_states)]
    n_uniq = [u.size for u in uniq]
    n_unpop = [int(unpop_mask[u].sum()) for u in uniq]
    rows = []
    for e in range(traj.e_states):
        rows.append({
            "state": f"E{e + 1}",
            "unique_items": n_uniq[e],
            "unique_ratio": n_uniq[e] / n_uniq[-1],
            "unpopular_items": n_unpop[e],
            "unpopular_frac": n_unpop[e] / n_uniq[e],
            "unpopular_ratio": (n_unpop[e] / n_unpop[-1]) if n_unpop[-1] else 0.0,
        })
    return rows


def cmd_analyze_trajectory(args) -> int:
    started = time.monotonic()
    ds = data_mod.load_dataset(_data_dir(args))
    unpop = unpopular_items(ds)
    rows = []
    for idx, path in enumerate(args.trajectories):
        traj = load_trajectory(path)
        for r in trajectory_diversity(traj, unpop):
            rows.append((f"{traj.kind}{idx}", r["state"], r["unique_items"],
                         f"{r['unique_ratio']:.4f}", r["unpopular_items"],
                         f"{r['unpopular_frac']:.4f}", f"{r['unpopular_ratio']:.4f}"))
    outputs = _write_report(
        rows, ("teacher", "state", "unique_items", "unique_ratio",
               "unpopular_items", "unpopular_frac", "unpopular_ratio"),
        args.out, "trajectory_report")
    _write_manifest(args.out, "analyze-trajectory", {},
                    list(args.trajectories), outputs, started)
    for row in rows:
        print("\t".join(str(c) for c in row))
    return 0


def study_supervisions(trajectories, lam: float = 10.0, k_out: int = 50):
    """The supervision grid: each teacher's checkpoints, the heterogeneous
    ensemble of all finals, and homogeneous ensembles where a kind appears
    more than once. Yields (label, target_rows)."""
    for idx, traj in enumerate(trajectories):
        for e in range(traj.e_states):
            yield f"{traj.kind}{idx}:E{e + 1}", traj.items[e]
    if len(trajectories) > 1:
        yield "ens:het", final_ensemble(trajectories, lam, k_out)
    by_kind = {}
    for traj in trajectories:
        by_kind.setdefault(traj.kind, []).append(traj)
    for kind, group in sorted(by_kind.items()):
        if len(group) > 1:
            yield f"ens:{kind}", final_ensemble(group, lam, k_out)


def run_study(trajectories, ds, cfg: TrainConfig, student_kind: str = "mf",
              student_dim: int = 6):
    """Fixed-target distillation against every supervision in the grid;
    returns rows of (label, D@10, D@50, NLL, epochs)."""
    rows = []
    k_out = max(cfg.k_dkc, cfg.p_minus_size)
    for label, target in study_supervisions(trajectories, cfg.lam, k_out):
        student = init_model(student_kind, ds.num_users, ds.num_items,
                             student_dim, cfg.seed)
        student, slog = distill_mod.train_fixed_target(student, target, ds, cfg)
        topk = rank_topk_all(student, ds.train_items, k_out)
        disc = distill_mod.eval_discrepancy(topk, target, lam=cfg.lam, ks=(10, 50))
        nll = distill_mod.eval_nll(student, ds, target,
                                   p_size=cfg.p_minus_size, seed=cfg.seed)
        rows.append((label, disc[("d", 10)], disc[("d", 50)], nll, slog.epochs_run))
    return rows


def cmd_study_discrepancy(args) -> int:
    started = time.monotonic()
    ds = data_mod.load_dataset(_data_dir(args))
    trajectories = [load_trajectory(p) for p in args.trajectories]
    cfg = _train_config_from_args(args)
    cfg.e_states = trajectories[0].e_states
    cfg.max_epochs = _resolve(args, "max_epochs", STUDY_EPOCHS_DEFAULT, int)
    rows = run_study(trajectories, ds, cfg,
                     student_kind=_resolve(args, "student_kind", "mf"),
                     student_dim=_resolve(args, "student_dim", 6, int))
    printable = [(label, f"{d10:.6f}", f"{d50:.6f}", f"{nll:.6f}", epochs)
                 for label, d10, d50, nll, epochs in rows]
    outputs = _write_report(printable, ("supervision", "D@10", "D@50", "NLL", "epochs"),
                            args.out, "discrepancy_study")
    _write_manifest(args.out, "study-discrepancy",
                    {"seed": cfg.seed, "epochs": cfg.max_epochs},
                    list(args.trajectories), outputs, started)
    for row in printable:
        print("\t".join(str(c) for c in row))
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hetcomp",
        description="Ranking distillation from heterogeneous teacher trajectories")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, help="parallel metric workers")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("prepare", help="filter, split, and densify interactions")
    p.add_argument("--input", required=True)
    p.add_argument("--kcore", type=int)
    p.add_argument("--ratios", help="train,valid,test (default 0.8,0.1,0.1)")
    p.add_argument("--fmt", choices=("whitespace", "tab"))
    common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train-teacher", help="train a teacher, record its trajectory")
    p.add_argument("--data")
    p.add_argument("--kind", required=True, choices=("mf", "ml", "dnn"))
    p.add_argument("--dim", type=int)
    p.add_argument("--E", type=int, dest="E")
    p.add_argument("--K", type=int, dest="K")
    p.add_argument("--lr", type=float)
    p.add_argument("--reg", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--patience", type=int)
    p.add_argument("--consistency", choices=("per_checkpoint", "converged_only"))
    common(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="train a student from teacher trajectories")
    p.add_argument("--data")
    p.add_argument("--trajectories", nargs="+", required=True)
    p.add_argument("--student-kind", dest="student_kind", choices=("mf", "ml", "dnn"))
    p.add_argument("--student-dim", dest="student_dim", type=int)
    p.add_argument("--variant", default="full",
                   choices=distill_mod.VARIANTS)
    for flag, dest in (("--period", "period"), ("--alpha0", "alpha0"),
                       ("--anneal", "anneal"), ("--lam", "lam"),
                       ("--k-dkc", "k_dkc"), ("--p-minus", "p_minus"),
                       ("--n-sample", "n_sample"), ("--lr", "lr"),
                       ("--reg", "reg"), ("--max-epochs", "max_epochs"),
                       ("--patience", "patience"), ("--batch-users", "batch_users")):
        kind = float if dest in ("alpha0", "anneal", "lam", "lr", "reg") else int
        p.add_argument(flag, dest=dest, type=kind)
    common(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("evaluate", help="metric report for a model checkpoint")
    p.add_argument("--data")
    p.add_argument("--model", required=True)
    p.add_argument("--against", required=True,
                   choices=("testset", "trajectory-final-ensemble"))
    p.add_argument("--trajectories", nargs="*", default=[])
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze-trajectory", help="trajectory diversity report")
    p.add_argument("--data")
    p.add_argument("--trajectories", nargs="+", required=True)
    common(p)
    p.set_defaults(func=cmd_analyze_trajectory)

    p = sub.add_parser("study-discrepancy",
                       help="fixed-target distillation difficulty per supervision")
    p.add_argument("--data")
    p.add_argument("--trajectories", nargs="+", required=True)
    p.add_argument("--student-kind", dest="student_kind", choices=("mf", "ml", "dnn"))
    p.add_argument("--student-dim", dest="student_dim", type=int)
    p.add_argument("--epochs", type=int, dest="max_epochs")
    common(p)
    p.set_defaults(func=cmd_study_discrepancy)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args._config = _read_config(getattr(args, "config", None))
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single CLI error boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
