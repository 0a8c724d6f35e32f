"""Command-line entry point: ``usrlab {pretrain,train,eval,transfer,oracle}``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
failure (including training divergence), 3 file-system errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, evaluation, oracle
from .agent import DivergenceError, TrainLog, pretrain_phi, reconstruction_mse, train
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config, parse_text
from .models import UsrModel

log = logging.getLogger("usrlab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3


class UsageError(ValueError):
    pass


def _meta(cfg: RunConfig, **extra) -> dict:
    meta = {
        "config": cfg.as_dict(),
        "layout_id": cfg.env.layout_id,
        "gamma_base": cfg.env.gamma_base,
        "seed": cfg.train.seed,
    }
    meta.update(extra)
    return meta


def _load_model(path):
    ckpt = checkpoint.load(path)
    return ckpt, checkpoint.model_from_checkpoint(ckpt)


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.experiment.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    seed = cfg.train.seed
    world = evaluation.make_world(cfg, seed)
    m = cfg.model
    model = UsrModel(world.obs_dim, m.d, m.hidden, m.ae_hidden, seed, m.feature_mode)
    lg = pretrain_phi(world, model, cfg.train) if not model.phi_frozen else TrainLog()
    mse = reconstruction_mse(world, model)
    checkpoint.save(checkpoint.model_to_checkpoint(model, _meta(cfg, stage="pretrain", env_steps=0,
                                                                  recon_mse=mse)), out / "pretrain.ckpt")
    lg.write_phase1_csv(out / "phase1.csv")
    print(f"reconstruction mse {mse:.3g}; wrote {out / 'pretrain.ckpt'}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    seed, k = cfg.train.seed, cfg.experiment.k
    if args.checkpoint:
        ckpt, model = _load_model(args.checkpoint)
        start = int(ckpt.meta.get("env_steps", 0))
        if not model.phi_frozen:
            raise UsageError("checkpoint has unfrozen features; run 'pretrain' first")
        if "k" in ckpt.meta and ckpt.meta["k"] != k:
            raise UsageError(f"checkpoint was trained with k={ckpt.meta['k']}, config says k={k}")
    else:
        model = evaluation.pretrained_model(cfg, seed)
        start = 0
    world = evaluation.make_world(cfg, seed)
    split = world.sample_source_goals(k, seed)
    tcfg = evaluation.train_config(cfg, seed + start)
    good = model.copy()
    try:
        lg = train(world, model, split.source, tcfg, start_step=start)
    except DivergenceError:
        checkpoint.save(checkpoint.model_to_checkpoint(good, _meta(cfg, stage="last-good", env_steps=start, k=k)),
                        out / "last_good.ckpt")
        raise
    meta = _meta(cfg, stage="train", env_steps=lg.env_steps, k=k, converged=lg.converged,
                 source_goals=[list(g) for g in split.source], target_goals=[list(g) for g in split.target])
    checkpoint.save(checkpoint.model_to_checkpoint(model, meta), out / "train.ckpt")
    lg.write_csv(out / "train_log.csv")
    print(f"{len(lg.episodes)} episodes, env_steps {lg.env_steps}, converged={lg.converged}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    x = cfg.experiment
    if args.checkpoint:
        ckpt, model = _load_model(args.checkpoint)
        seed = int(ckpt.meta.get("seed", cfg.train.seed))
        k = int(ckpt.meta.get("k", x.k))
        world = evaluation.make_world(cfg, seed)
        targets = world.goal_pools()[1]
        refs = None
        if x.reference_mode == "trained":
            refs = evaluation.train_reference_models(cfg, model, targets, seed)
        metrics = evaluation.goal_metrics(model, world, targets, x.reference_mode, x.reference_temperature, refs)
        with (out / "eval_goals.csv").open("w") as fh:
            fh.write("goal_row,goal_col,usr_mse,policy_ce\n")
            for g, mse, ce in metrics:
                fh.write(f"{g.row},{g.col},{mse!r},{ce!r}\n")
        rows = [(k, "usr_mse", seed, float(np.mean([m[1] for m in metrics]))),
                (k, "policy_ce", seed, float(np.mean([m[2] for m in metrics])))]
    else:
        rows = evaluation.generalization_sweep(cfg)
    paths = evaluation.emit_generalization(rows, f"{out}{os.sep}")
    for p in evaluation.aggregate_generalization(rows):
        print(f"k={p.k:<3d} {p.metric:<9s} mean {p.mean:.4g} stderr {p.stderr:.2g} (n={p.n_repeats})")
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def cmd_transfer(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    curves = evaluation.transfer_experiment(cfg)
    paths = evaluation.emit_transfer(curves, f"{out}{os.sep}")
    for c in curves:
        stt = [cell.steps_to_threshold for cell in c.cells]
        fails = sum(bool(cell.failure) for cell in c.cells)
        print(f"{c.label:<9s} steps to {evaluation.THRESHOLD}: {stt}" + (f" ({fails} failed)" if fails else ""))
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def cmd_oracle(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    world = evaluation.make_world(cfg, cfg.train.seed)
    source, target = world.goal_pools()
    worst = 0.0
    for pool, goals in (("source", source), ("target", target)):
        for g in goals:
            sol = oracle.solve_goal(world, g)
            oracle.write_solution_csv(sol, world, out / f"oracle_{pool}_{g.row:02d}_{g.col:02d}.csv")
            if args.verify:
                worst = max(worst, oracle.bellman_residual(oracle.extract_mdp(world, g), sol.v_star))
    print(f"wrote {len(source) + len(target)} goal solutions to {out}")
    if args.verify:
        print(f"max Bellman residual {worst:.3g}")
        if worst >= 1e-10:
            return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "transfer": cmd_transfer,
    "oracle": cmd_oracle,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="usrlab", description="Universal successor representation experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file of dotted keys, e.g. train.lr_pi = 1e-4")
    common.add_argument("--seed", type=int, help="seed for this run (sets train.seed and experiment.seeds)")
    common.add_argument("--out", help="output directory (default: experiment.output_dir)")
    common.add_argument("--k", type=int, help="number of source goals")
    common.add_argument("--reference", choices=["oracle", "trained"], help="generalization reference")
    common.add_argument("--phi-indexing", choices=["current", "next"], help="feature index of the TD target")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (value parsed as TOML)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="phase 1: fit and freeze the feature autoencoder")
    p = sub.add_parser("train", parents=[common], help="phase 2: actor-critic on k source goals")
    p.add_argument("--checkpoint", help="start from this checkpoint (pretrained or partly trained)")
    p = sub.add_parser("eval", parents=[common], help="generalization to target goals (k sweep or one checkpoint)")
    p.add_argument("--checkpoint", help="evaluate this trained checkpoint instead of running the sweep")
    sub.add_parser("transfer", parents=[common], help="transfer-as-initialisation vs random initialisation")
    p = sub.add_parser("oracle", parents=[common], help="exact tabular solutions for all 64 goals")
    p.add_argument("--verify", action="store_true", help="recheck the Bellman residual of every solution")
    return parser


def _overrides(args) -> dict:
    values = {}
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(item, "expected KEY=VALUE")
        values.update(parse_text(f"{key.strip()} = {raw.strip()}"))
    if args.seed is not None:
        values["train.seed"] = args.seed
        values["experiment.seeds"] = [args.seed]
    if args.k is not None:
        values["experiment.k"] = args.k
        values["experiment.k_values"] = [args.k]
    if args.reference is not None:
        values["experiment.reference_mode"] = args.reference
    if args.phi_indexing is not None:
        values["train.phi_indexing"] = args.phi_indexing
    return values


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, FloatingPointError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
