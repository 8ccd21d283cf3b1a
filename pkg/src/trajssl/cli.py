"""Command-line surface: synth, pretrain, finetune, eval, gradcheck, export-svg.

BLAS thread pinning must happen before numpy is first imported, so this
module only imports the standard library at the top level; compute modules
load lazily inside the command handlers.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys


def _pin_threads(n: int):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ[var] = str(n)


def _setup_logging():
    level = os.environ.get("TRAJSSL_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trajssl",
                                 description="scenario-bank SSL pre-training for trajectory prediction")
    # global flags are legal both before and after the subcommand; the
    # after-subcommand copies only override when actually given
    common = argparse.ArgumentParser(add_help=False)
    for parser, default in ((ap, False), (common, True)):
        sup = argparse.SUPPRESS
        parser.add_argument("--config", help="JSON run configuration",
                            **({"default": sup} if default else {}))
        parser.add_argument("--seed", type=int, help="override the config seed",
                            **({"default": sup} if default else {}))
        parser.add_argument("--threads", type=int, help="BLAS/kernel threads (default 1)",
                            **({"default": sup} if default else {"default": 1}))
        parser.add_argument("--precision", choices=["f32", "f64"],
                            help="override the config precision",
                            **({"default": sup} if default else {}))
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate synthetic scenario banks", parents=[common])
    sp.add_argument("--profiles", nargs="+", required=True)
    sp.add_argument("--counts", nargs="+", type=int, required=True)
    sp.add_argument("--out", required=True)

    pp = sub.add_parser("pretrain", help="run self-supervised pre-training", parents=[common])
    pp.add_argument("--out-dir", required=True)
    pp.add_argument("--pretext", choices=["smartpretrain", "prediction"], default="smartpretrain",
                    help="combined contrastive+reconstruction pretext, or the plain "
                         "motion-prediction objective as the pretext baseline")
    pp.add_argument("--epochs", type=int, help="override pretrain_epochs")

    fp = sub.add_parser("finetune", help="fine-tune on the downstream task", parents=[common])
    fp.add_argument("--out-dir", required=True)
    group = fp.add_mutually_exclusive_group(required=True)
    group.add_argument("--init", help="pre-trained checkpoint to initialize the encoder")
    group.add_argument("--scratch", action="store_true", help="train from random init")
    fp.add_argument("--epochs", type=int, help="override finetune_epochs")

    ep = sub.add_parser("eval", help="evaluate a checkpoint", parents=[common])
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--split", choices=["train", "eval"], default="eval")
    ep.add_argument("--out", required=True)

    sub.add_parser("gradcheck", help="run every finite-difference suite in 64-bit", parents=[common])

    xp = sub.add_parser("export-svg", help="render a scenario (optionally with predictions)", parents=[common])
    xp.add_argument("--scenarios", required=True)
    xp.add_argument("--index", type=int, default=0)
    xp.add_argument("--out", required=True)
    xp.add_argument("--checkpoint", help="fine-tuned checkpoint to draw predictions from")

    return ap


def _load_cfg(args):
    from .config import load_config

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.precision is not None:
        overrides["precision"] = args.precision
    return load_config(args.config, overrides)


def _require_bank(cfg, effective, role):
    from .errors import ConfigError
    from .sampling import build_bank

    paths = cfg.banks.get(role, [])
    if not paths:
        raise ConfigError(f"config field banks.{role}: no input files configured")
    for p in paths:
        if not os.path.exists(p):
            raise ConfigError(f"config field banks.{role}: missing file {p}")
    return build_bank(paths, cfg.standard)


def _echo_config(out_dir, effective):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(effective, fh, sort_keys=True, indent=2)
        fh.write("\n")


def cmd_synth(args) -> int:
    from .errors import ConfigError
    from .synth import STOCK_PROFILES, gen_bank

    if len(args.profiles) != len(args.counts):
        raise ConfigError("config field profiles: needs one count per profile")
    unknown = [p for p in args.profiles if p not in STOCK_PROFILES]
    if unknown:
        raise ConfigError(f"config field profiles: unknown {unknown}; "
                          f"stock profiles: {sorted(STOCK_PROFILES)}")
    cfg, _ = _load_cfg(args)
    n = gen_bank([STOCK_PROFILES[p] for p in args.profiles], args.counts, cfg.seed, args.out)
    print(f"wrote {n} scenarios to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    from .config import config_hash
    from .finetune import run_finetune
    from .pretext import pretrain_loop

    cfg, effective = _load_cfg(args)
    epochs = args.epochs or cfg.pretrain_epochs
    bank = _require_bank(cfg, effective, "pretrain")
    _echo_config(args.out_dir, effective)
    if args.pretext == "prediction":
        ckpt, log_path, _ = run_finetune(bank, cfg.finetune_settings(), epochs,
                                         cfg.batch_size, cfg.seed, args.out_dir,
                                         init_ckpt=None, dtype=cfg.dtype,
                                         ckpt_name="pretrain_final.tssl",
                                         log_name="pretrain_log.tsv")
    else:
        ckpt, log_path = pretrain_loop(bank, cfg.pretrain_settings(), epochs,
                                       cfg.batch_size, cfg.seed, args.out_dir,
                                       dtype=cfg.dtype, checkpoint_every=cfg.checkpoint_every)
    print(f"checkpoint {ckpt} (config {config_hash(effective)}), log {log_path}")
    return 0


def cmd_finetune(args) -> int:
    from .config import config_hash
    from .finetune import run_finetune

    cfg, effective = _load_cfg(args)
    epochs = args.epochs or cfg.finetune_epochs
    bank = _require_bank(cfg, effective, "train")
    _echo_config(args.out_dir, effective)
    ckpt, log_path, loaded = run_finetune(bank, cfg.finetune_settings(), epochs,
                                          cfg.batch_size, cfg.seed, args.out_dir,
                                          init_ckpt=args.init, dtype=cfg.dtype)
    origin = f" (encoder from {loaded})" if loaded else " (scratch)"
    print(f"checkpoint {ckpt}{origin} (config {config_hash(effective)}), log {log_path}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint_into
    from .config import config_hash
    from .finetune import build_model_store, evaluate_model
    from .metrics import write_report

    cfg, effective = _load_cfg(args)
    bank = _require_bank(cfg, effective, args.split)
    store = build_model_store(cfg.encoder, cfg.num_modes, cfg.standard.T_f, cfg.seed, cfg.dtype)
    ckpt_id = load_checkpoint_into(store, args.checkpoint)
    report = evaluate_model(bank, store, cfg.encoder, cfg.num_modes, cfg.batch_size,
                            cfg.miss_threshold, cfg.ade_mode)
    write_report(args.out, report, config_hash(effective), ckpt_id, effective)
    print(f"minADE {report.min_ade:.4f}  minFDE {report.min_fde:.4f}  "
          f"MR {report.miss_rate:.4f}  n={report.count}")
    return 0


def cmd_gradcheck(args) -> int:
    from .verification import run_all_gradchecks

    results = run_all_gradchecks()
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.suite}: max relative error {r.max_rel_err:.3e} (tol {r.tolerance:.0e})")
        ok = ok and r.passed
    return 0 if ok else 1


def cmd_export_svg(args) -> int:
    from .checkpoint import load_checkpoint_into
    from .finetune import build_model_store, predict_batch, prepare_downstream_batch
    from .scenario import read_scenarios, standardize_scenario
    from .svg import export_svg

    cfg, effective = _load_cfg(args)
    scen = None
    for i, s in enumerate(read_scenarios(args.scenarios)):
        if i == args.index:
            scen = s
            break
    if scen is None:
        raise FileNotFoundError(f"scenario index {args.index} not in {args.scenarios}")
    scen = standardize_scenario(scen, cfg.standard)

    prediction = trans = rot = None
    if args.checkpoint:
        store = build_model_store(cfg.encoder, cfg.num_modes, cfg.standard.T_f, cfg.seed, cfg.dtype)
        load_checkpoint_into(store, args.checkpoint)
        prep = prepare_downstream_batch([scen], cfg.encoder, cfg.standard.T_h)
        if prep is not None:
            prediction = predict_batch(prep, store, cfg.encoder, cfg.num_modes, cfg.standard.T_f)[0]
            trans, rot = prep.trans[0], prep.rot[0]
    export_svg(scen, args.out, cfg.standard.T_h, prediction, trans, rot)
    print(f"wrote {args.out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "export-svg": cmd_export_svg,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _pin_threads(args.threads)
    _setup_logging()
    from .errors import TrajsslError

    try:
        return COMMANDS[args.command](args)
    except (TrajsslError, FileNotFoundError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
