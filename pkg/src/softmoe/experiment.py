"""End-to-end experiment pipeline and run-directory layout.

A run directory contains::

    config.txt                  resolved configuration (every key)
    checkpoint_init.txt         parameters at step 0
    checkpoint_final.txt        parameters after training
    checkpoint_pruned.txt       parameters kept by pruning
    trajectory.csv              t, loss, loss_se, g1_pair_1..m*, g2_pair_1..m*, max_offpair, max_eps_agg
    alignments_final_g1.csv     m rows x m* columns of router alignments
    alignments_final_g2.csv     m rows x m* columns of expert alignments
    prune.csv                   tau, removed_index, loss, loss_se
    finetune.csv                t, dist_sq
    summary.json                stage status, recovery/prune/finetune results and pass flags

Checkpoints use the text format of :func:`softmoe.model.save_checkpoint`.
The ``g*_pair_l`` columns follow the greedy pairing order, and
``max_eps_agg`` is the running supremum of the second aggregate error at
the last rank. Student indices in CSVs and the summary are 0-based.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from softmoe.config import ExperimentConfig, format_config, parse_config
from softmoe.dynamics import (
    PairingMap,
    TrainConfig,
    alignment_snapshot,
    check_init_conditions,
    recovery_shape,
    recovery_times,
    train,
)
from softmoe.errors import NumericalFailure
from softmoe.hermite import sigmoid_profile
from softmoe.model import init_student, load_checkpoint, make_teacher, save_checkpoint
from softmoe.prune import AnalyticEstimator, FinetuneConfig, McEstimator, finetune, greedy_prune

RUNS_ENV = "SOFTMOE_RUNS"
STAGES = ("train", "prune", "finetune")


def runs_root() -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs"))


def default_run_dir(cfg: ExperimentConfig) -> Path:
    return runs_root() / f"m{cfg.model.m}-ms{cfg.model.m_star}-d{cfg.model.d}-seed{cfg.seed}"


def fmt(x) -> str:
    return format(float(x), ".12g")


def write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def _finite(x):
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_finite(v) for v in x]
    if isinstance(x, (float, np.floating)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


def write_summary(run_dir: Path, summary: dict) -> None:
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=_finite) + "\n")


def read_summary(run_dir: Path) -> dict:
    path = run_dir / "summary.json"
    return json.loads(path.read_text()) if path.exists() else {}


@dataclass
class RunArtifact:
    run_dir: Path
    summary: dict


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        eta=t.eta,
        t_max_coeff=t.t_max_coeff,
        batch=t.batch,
        record_count=t.record_count,
        gradient=t.gradient,
        use_norms_pairing=t.use_norms_pairing,
    )


def stage_train(cfg: ExperimentConfig, run_dir: Path, summary: dict) -> None:
    profile = sigmoid_profile(cfg.oracle.truncation_K)
    teacher = make_teacher(cfg.model.m_star, cfg.model.d, cfg.teacher.mode, cfg.seed)
    params0 = init_student(cfg.model.m, cfg.model.d, cfg.seed)
    save_checkpoint(run_dir / "checkpoint_init.txt", params0, cfg.model.m_star, cfg.seed, 0)
    snap0 = alignment_snapshot(params0, teacher)
    audit = check_init_conditions(snap0, params0, cfg.thresholds.delta_s, cfg.train.use_norms_pairing)
    summary["init"] = {
        "delta_s": audit.delta_s,
        "rowwise_ok": audit.rowwise_ok.tolist(),
        "colwise_ok": audit.colwise_ok.tolist(),
        "threshold_ok": audit.threshold_ok.tolist(),
        "magnitude_ok": audit.magnitude_ok.tolist(),
        "all_gaps_ok": audit.all_gaps_ok,
        "norm_band_ok": audit.norm_band_ok,
        "cross_alignment_max": audit.cross_alignment_max,
        "self_alignment_max": audit.self_alignment_max,
    }
    tcfg = train_config(cfg)
    traj = train(params0, teacher, tcfg, cfg.seed, profile)
    steps = traj.steps[-1]
    save_checkpoint(run_dir / "checkpoint_final.txt", traj.final_params, cfg.model.m_star, cfg.seed, steps)

    g1 = traj.paired_series("gamma1")
    g2 = traj.paired_series("gamma2")
    offpair = traj.max_offpair()
    ms = cfg.model.m_star
    header = ["t", "loss", "loss_se"] + [f"g1_pair_{l + 1}" for l in range(ms)]
    header += [f"g2_pair_{l + 1}" for l in range(ms)] + ["max_offpair", "max_eps_agg"]
    rows = (
        [t, L, se, *a, *b, o, e]
        for t, L, se, a, b, o, e in zip(traj.times, traj.losses, traj.loss_se, g1, g2, offpair, traj.agg_sup)
    )
    write_csv(run_dir / "trajectory.csv", header, rows)
    final = traj.snapshots[-1]
    cols = [f"teacher_{j + 1}" for j in range(ms)]
    write_csv(run_dir / "alignments_final_g1.csv", cols, final.gamma1)
    write_csv(run_dir / "alignments_final_g2.csv", cols, final.gamma2)

    th = cfg.thresholds
    rep = recovery_times(traj, xi=th.xi)
    shape = recovery_shape(final, th.xi, th.unmatched_bound)
    near = bool(shape.unique_per_teacher and shape.min_matched_alignment >= th.near_perfect)
    summary["pairing"] = [list(p) for p in traj.pairing.pairs]
    summary["train"] = {
        "steps": steps,
        "t_final": traj.times[-1],
        "final_loss": traj.losses[-1],
        "final_loss_se": traj.loss_se[-1],
    }
    summary["recovery"] = {
        "T_xi": rep.T.tolist(),
        "T_r": rep.T_r.tolist(),
        "order_matches_pairing": rep.order_matches_pairing,
        "final_paired_gamma1": rep.final_gamma1.tolist(),
        "final_paired_gamma2": rep.final_gamma2.tolist(),
        "matched": shape.matched.tolist(),
        "recovered_pairs": shape.unique_per_teacher,
        "unmatched_cross_max": shape.unmatched_cross_max,
        "unmatched_self_max": shape.unmatched_self_max,
        "shape_ok": shape.passed,
        "near_perfect_ok": near,
    }


def _estimator(cfg: ExperimentConfig):
    if cfg.prune.estimator == "analytic":
        return AnalyticEstimator(sigmoid_profile(cfg.oracle.truncation_K))
    return McEstimator(cfg.prune.batch, cfg.seed)


def stage_prune(cfg: ExperimentConfig, run_dir: Path, summary: dict) -> None:
    params, _ = load_checkpoint(run_dir / "checkpoint_final.txt")
    teacher = make_teacher(cfg.model.m_star, cfg.model.d, cfg.teacher.mode, cfg.seed)
    res = greedy_prune(params, teacher, _estimator(cfg), cfg.prune.margin)
    rows = [[0, -1, res.initial_loss.value, res.initial_loss.std_error]]
    rows += [[k + 1, r, est.value, est.std_error] for k, (r, est) in enumerate(zip(res.removal_order, res.losses))]
    write_csv(run_dir / "prune.csv", ["tau", "removed_index", "loss", "loss_se"], rows)
    if res.pruned_params is not None:
        save_checkpoint(run_dir / "checkpoint_pruned.txt", res.pruned_params, cfg.model.m_star, cfg.seed, 0)
    matched = summary.get("recovery", {}).get("matched", [])
    recovered = sorted(i for i in matched if i >= 0)
    summary["prune"] = {
        "tau_star": res.tau_star,
        "removal_order": res.removal_order,
        "kept": res.kept,
        "kept_matches_recovered": bool(len(recovered) == cfg.model.m_star and res.kept == recovered),
    }


def stage_finetune(cfg: ExperimentConfig, run_dir: Path, summary: dict) -> None:
    path = run_dir / "checkpoint_pruned.txt"
    if not path.exists():
        raise RuntimeError("no pruned checkpoint")
    params, _ = load_checkpoint(path)
    teacher = make_teacher(cfg.model.m_star, cfg.model.d, cfg.teacher.mode, cfg.seed)
    kept = summary.get("prune", {}).get("kept", list(range(params.m)))
    matched = summary.get("recovery", {}).get("matched", [])
    pairing = None
    if matched and all(i in kept for i in matched):
        pairing = PairingMap(tuple((kept.index(i), j) for j, i in enumerate(matched)))
    f = cfg.finetune
    fcfg = FinetuneConfig(
        eta=f.eta,
        steps=f.steps,
        gradient=f.gradient,
        batch=f.batch,
        record_every=f.record_every,
        max_row_distance=f.max_row_distance,
    )
    try:
        rep = finetune(params, teacher, pairing, fcfg, cfg.seed, sigmoid_profile(cfg.oracle.truncation_K))
    except NumericalFailure as exc:
        rep = exc.state
        write_csv(run_dir / "finetune.csv", ["t", "dist_sq"], zip(rep.times, rep.dist_sq))
        raise
    write_csv(run_dir / "finetune.csv", ["t", "dist_sq"], zip(rep.times, rep.dist_sq))
    summary["finetune"] = {
        "kappa_hat": rep.kappa_hat,
        "fit_r2": rep.fit_r2,
        "fit_window": list(rep.fit_window),
        "at_optimum": rep.at_optimum,
        "initial_dist_sq": float(rep.dist_sq[0]),
        "final_dist_sq": float(rep.dist_sq[-1]),
        "pairing": [list(p) for p in rep.pairing.pairs],
        "pairings_agree": rep.pairings_agree,
    }


STAGE_FUNCS = {"train": stage_train, "prune": stage_prune, "finetune": stage_finetune}


def run_stages(cfg: ExperimentConfig, run_dir: Path, stages) -> dict:
    """Run ``stages`` in order, recording each status; stops at the first failure."""
    summary = read_summary(run_dir)
    status = summary.setdefault("stages", {})
    for name in stages:
        try:
            STAGE_FUNCS[name](cfg, run_dir, summary)
            status[name] = "ok"
        except NumericalFailure as exc:
            status[name] = f"numerical failure: {exc}"
            _finalize(summary, cfg)
            write_summary(run_dir, summary)
            raise
        except (RuntimeError, ValueError) as exc:
            status[name] = f"failed: {exc}"
            break
    _finalize(summary, cfg)
    write_summary(run_dir, summary)
    return summary


def _finalize(summary: dict, cfg: ExperimentConfig) -> None:
    rec = summary.get("recovery", {})
    flags = {
        "recovered_pairs": rec.get("recovered_pairs"),
        "shape_ok": rec.get("shape_ok"),
        "order_ok": rec.get("order_matches_pairing"),
        "near_perfect_ok": rec.get("near_perfect_ok"),
    }
    if "prune" in summary:
        flags["prune_ok"] = summary["prune"]["kept_matches_recovered"]
    if "finetune" in summary:
        k = summary["finetune"]["kappa_hat"]
        flags["finetune_ok"] = bool(k is not None and np.isfinite(k) and k > 0)
    summary["flags"] = flags
    summary["m_star"] = cfg.model.m_star


def run_experiment(cfg: ExperimentConfig, run_dir=None, stop_after: str = "finetune") -> RunArtifact:
    """Execute the pipeline up to and including ``stop_after``."""
    if stop_after not in STAGES:
        raise ValueError(f"stop_after must be one of {STAGES}")
    run_dir = Path(run_dir) if run_dir is not None else default_run_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    for stale in ("summary.json", "prune.csv", "finetune.csv", "checkpoint_pruned.txt"):
        (run_dir / stale).unlink(missing_ok=True)
    (run_dir / "config.txt").write_text(format_config(cfg))
    stages = STAGES[: STAGES.index(stop_after) + 1]
    return RunArtifact(run_dir, run_stages(cfg, run_dir, stages))


def resume_stage(run_dir, stage: str) -> RunArtifact:
    """Re-run one stage of an existing run using its stored configuration."""
    run_dir = Path(run_dir)
    cfg = parse_config(run_dir / "config.txt")
    return RunArtifact(run_dir, run_stages(cfg, run_dir, [stage]))
