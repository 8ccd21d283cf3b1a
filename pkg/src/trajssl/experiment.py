"""Desk-scale experiment drivers: the pretrain-vs-scratch efficacy study and
the pretext/reconstruction-target ablation matrix.

Training runs for different seeds are independent processes (fork start
method, single-threaded BLAS each), so the study saturates a multi-core
machine while every individual run stays bit-reproducible.
"""

from __future__ import annotations

import json
import logging
import multiprocessing
import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_checkpoint_into
from .config import RunConfig, config_from_dict, config_hash, effective_dict
from .encoder import ReferenceEncoderConfig
from .finetune import build_model_store, evaluate_model, run_finetune
from .metrics import write_report
from .pretext import pretrain_loop
from .sampling import DataBank, build_bank
from .scenario import StandardProfile
from .synth import STOCK_PROFILES, gen_bank

log = logging.getLogger("trajssl.experiment")

STOCK_STANDARD = StandardProfile(sample_rate=10.0, T_h=20, T_f=30, map_resolution=1.0)
MIXED_PROFILES = ("argo-like", "argo2-like", "womd-like")


@dataclass(frozen=True)
class DeskPlan:
    """Sizes and schedules of the efficacy experiment."""

    out_dir: str
    scenarios_per_profile: int = 2000
    train_scenarios: int = 1000
    eval_scenarios: int = 500
    pretrain_epochs: int = 20
    finetune_epochs: int = 10
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    batch_size: int = 64
    workers: int | None = None
    data_seed: int = 2025
    encoder: ReferenceEncoderConfig = field(default_factory=ReferenceEncoderConfig)
    standard: StandardProfile = STOCK_STANDARD


def _pin_worker_threads():
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ.setdefault(var, "1")


def synthesize_banks(plan: DeskPlan) -> dict[str, str]:
    """Write the four banks: mixed + single pre-training, train, eval."""
    os.makedirs(plan.out_dir, exist_ok=True)
    n = plan.scenarios_per_profile
    paths = {
        "mixed": os.path.join(plan.out_dir, "bank_mixed.jsonl"),
        "single": os.path.join(plan.out_dir, "bank_single.jsonl"),
        "train": os.path.join(plan.out_dir, "bank_train.jsonl"),
        "eval": os.path.join(plan.out_dir, "bank_eval.jsonl"),
    }
    mixed = [STOCK_PROFILES[p] for p in MIXED_PROFILES]
    argo = STOCK_PROFILES["argo-like"]
    gen_bank(mixed, [n] * len(mixed), plan.data_seed, paths["mixed"])
    gen_bank([argo], [n], plan.data_seed, paths["single"])
    gen_bank([argo], [plan.train_scenarios], plan.data_seed + 1, paths["train"])
    gen_bank([argo], [plan.eval_scenarios], plan.data_seed + 2, paths["eval"])
    return paths


# Banks shared with forked workers (read-only after this point).
_SHARED_BANKS: dict[str, DataBank] = {}


def _pretrain_worker(job):
    _pin_worker_threads()
    tag, seed, plan = job
    bank = _SHARED_BANKS[tag]
    run_dir = os.path.join(plan.out_dir, f"pretrain_{tag}_s{seed}")
    cfg = RunConfig(standard=plan.standard, encoder=plan.encoder, seed=seed,
                    batch_size=plan.batch_size)
    ckpt, _ = pretrain_loop(bank, cfg.pretrain_settings(), plan.pretrain_epochs,
                            plan.batch_size, seed, run_dir, dtype=cfg.dtype)
    return tag, seed, ckpt


def _finetune_worker(job):
    _pin_worker_threads()
    arm, seed, init_ckpt, plan = job
    train = _SHARED_BANKS["train"]
    evalb = _SHARED_BANKS["eval"]
    run_dir = os.path.join(plan.out_dir, f"finetune_{arm}_s{seed}")
    cfg = RunConfig(standard=plan.standard, encoder=plan.encoder, seed=seed,
                    batch_size=plan.batch_size)
    ckpt, _, _ = run_finetune(train, cfg.finetune_settings(), plan.finetune_epochs,
                              plan.batch_size, seed, run_dir, init_ckpt=init_ckpt,
                              dtype=cfg.dtype)
    store = build_model_store(plan.encoder, cfg.num_modes, plan.standard.T_f, seed, cfg.dtype)
    load_checkpoint_into(store, ckpt)
    report = evaluate_model(evalb, store, plan.encoder, cfg.num_modes, plan.batch_size)
    return arm, seed, {"min_ade": report.min_ade, "min_fde": report.min_fde,
                       "miss_rate": report.miss_rate, "count": report.count}


def _run_jobs(worker, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [worker(j) for j in jobs]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(processes=min(workers, len(jobs))) as pool:
        return pool.map(worker, jobs)


def run_desk_experiment(plan: DeskPlan, banks: dict[str, str] | None = None) -> dict:
    """Pretrained (mixed and single-profile banks) vs scratch, per seed.

    Returns the summary dict also written to ``desk_summary.json``.
    """
    _pin_worker_threads()
    os.makedirs(plan.out_dir, exist_ok=True)
    if banks is None:
        log.info("synthesizing banks under %s", plan.out_dir)
        banks = synthesize_banks(plan)

    _SHARED_BANKS["mixed"] = build_bank([banks["mixed"]], plan.standard)
    _SHARED_BANKS["single"] = build_bank([banks["single"]], plan.standard)
    _SHARED_BANKS["train"] = build_bank([banks["train"]], plan.standard)
    _SHARED_BANKS["eval"] = build_bank([banks["eval"]], plan.standard)

    workers = plan.workers or (os.cpu_count() or 1)
    pre_jobs = [(tag, seed, plan) for seed in plan.seeds for tag in ("mixed", "single")]
    log.info("running %d pre-training jobs on %d workers", len(pre_jobs), workers)
    ckpts = {(tag, seed): ckpt for tag, seed, ckpt in _run_jobs(_pretrain_worker, pre_jobs, workers)}

    ft_jobs = []
    for seed in plan.seeds:
        ft_jobs.append(("mixed", seed, ckpts[("mixed", seed)], plan))
        ft_jobs.append(("single", seed, ckpts[("single", seed)], plan))
        ft_jobs.append(("scratch", seed, None, plan))
    log.info("running %d finetune+eval jobs", len(ft_jobs))
    results: dict[str, dict[int, dict]] = {"mixed": {}, "single": {}, "scratch": {}}
    for arm, seed, metrics in _run_jobs(_finetune_worker, ft_jobs, workers):
        results[arm][seed] = metrics

    per_seed = {
        str(seed): {arm: results[arm][seed] for arm in ("mixed", "single", "scratch")}
        for seed in plan.seeds
    }
    wins = sum(
        results["mixed"][s]["min_fde"] <= results["scratch"][s]["min_fde"] for s in plan.seeds
    )
    mixed_mean = float(np.mean([results["mixed"][s]["min_fde"] for s in plan.seeds]))
    single_mean = float(np.mean([results["single"][s]["min_fde"] for s in plan.seeds]))
    scratch_mean = float(np.mean([results["scratch"][s]["min_fde"] for s in plan.seeds]))
    summary = {
        "per_seed": per_seed,
        "pretrained_wins": int(wins),
        "n_seeds": len(plan.seeds),
        "mean_min_fde": {"mixed": mixed_mean, "single": single_mean, "scratch": scratch_mean},
        # >0 means the mixed bank was worse than single-profile by this fraction
        "mixed_vs_single_regression": (mixed_mean - single_mean) / single_mean,
    }
    with open(os.path.join(plan.out_dir, "desk_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("desk experiment: wins %d/%d, mean minFDE mixed %.3f single %.3f scratch %.3f",
             wins, len(plan.seeds), mixed_mean, single_mean, scratch_mean)
    return summary


# ---------------------------------------------------------------------------
# Ablation matrix (pretext tasks x reconstruction targets)
# ---------------------------------------------------------------------------

ABLATIONS: dict[str, dict] = {
    "contrastive_only": {"tasks": "contrastive"},
    "reconstruction_only": {"tasks": "reconstruction"},
    "combined": {"tasks": "both"},
    "target_input_window": {"recon_target": "input_window"},
    "target_entire_scenario": {"recon_target": "entire_scenario"},
    "target_complement": {"recon_target": "complement_of_input"},
    "target_other_window": {"recon_target": "other_window"},
}


def _ablation_worker(job):
    _pin_worker_threads()
    name, overrides, plan = job
    raw = {
        "standard": {"sample_rate_hz": plan.standard.sample_rate, "T_h": plan.standard.T_h,
                     "T_f": plan.standard.T_f, "map_resolution": plan.standard.map_resolution},
        "encoder": {"embed_dim": plan.encoder.embed_dim, "hidden_dim": plan.encoder.hidden_dim,
                    "k_map": plan.encoder.k_map, "attention_radius": plan.encoder.attention_radius},
        "batch_size": plan.batch_size,
        "pretrain_epochs": plan.pretrain_epochs,
        "finetune_epochs": plan.finetune_epochs,
        **overrides,
    }
    cfg = config_from_dict(raw)
    eff = effective_dict(raw)
    run_dir = os.path.join(plan.out_dir, f"ablation_{name}")
    pre_ckpt, _ = pretrain_loop(_SHARED_BANKS["mixed"], cfg.pretrain_settings(),
                                plan.pretrain_epochs, plan.batch_size, cfg.seed, run_dir,
                                dtype=cfg.dtype)
    ft_ckpt, _, _ = run_finetune(_SHARED_BANKS["train"], cfg.finetune_settings(),
                                 plan.finetune_epochs, plan.batch_size, cfg.seed, run_dir,
                                 init_ckpt=pre_ckpt, dtype=cfg.dtype)
    store = build_model_store(cfg.encoder, cfg.num_modes, plan.standard.T_f, cfg.seed, cfg.dtype)
    ckpt_id = load_checkpoint_into(store, ft_ckpt)
    report = evaluate_model(_SHARED_BANKS["eval"], store, cfg.encoder, cfg.num_modes,
                            plan.batch_size)
    metrics_path = os.path.join(run_dir, "metrics.tsv")
    write_report(metrics_path, report, config_hash(eff), ckpt_id, eff)
    return name, metrics_path, config_hash(eff)


def run_ablation_matrix(plan: DeskPlan, banks: dict[str, str] | None = None) -> dict[str, dict]:
    """Run every ablation end to end; returns {name: {metrics, config_hash}}."""
    _pin_worker_threads()
    os.makedirs(plan.out_dir, exist_ok=True)
    if banks is None:
        banks = synthesize_banks(plan)
    _SHARED_BANKS["mixed"] = build_bank([banks["mixed"]], plan.standard)
    _SHARED_BANKS["train"] = build_bank([banks["train"]], plan.standard)
    _SHARED_BANKS["eval"] = build_bank([banks["eval"]], plan.standard)

    workers = plan.workers or (os.cpu_count() or 1)
    jobs = [(name, overrides, plan) for name, overrides in ABLATIONS.items()]
    out = {}
    for name, metrics_path, chash in _run_jobs(_ablation_worker, jobs, workers):
        out[name] = {"metrics": metrics_path, "config_hash": chash}
    with open(os.path.join(plan.out_dir, "ablation_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out
