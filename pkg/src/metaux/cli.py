"""Command-line entry point.

Subcommands: gen (write a dataset), train, eval, robust (corruption sweep),
sweep (branch-weight sweep), check (built-in correctness suite).  Exit codes:
0 success, 1 runtime or check failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, load_run_config, write_snapshot
from .episodes import load_pool, regenerate_pool, save_pool, load_manifest, generate_pool
from .errors import CheckpointError, ConfigError, MetauxError, PoolError
from .evaluation import (evaluate, lambda_sweep, robustness_sweep, write_table_csv,
                         write_table_json)
from .meta import meta_train
from .model import load_params, save_params
from .selfcheck import run_checks

DEFAULT_LAMBDA_GRID = (0.3, 0.4, 0.5, 0.55, 0.6, 0.7)
DEFAULT_PROPORTIONS = (0.0, 0.1, 0.3, 0.5)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", default=None, help="JSON config file")
    p.add_argument("--out", "-o", default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)


def _train_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--order", choices=("first", "second"), default=None)
    p.add_argument("--lambda1", type=float, default=None)
    p.add_argument("--aux-loss", choices=("mmd", "cross-kernel"), default=None)
    p.add_argument("--steps", type=int, default=None, help="outer steps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metaux",
                                     description="meta-auxiliary few-shot learning engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the synthetic dataset")
    _add_common(p)

    p = sub.add_parser("train", help="meta-train on a dataset")
    _add_common(p)
    _train_overrides(p)
    p.add_argument("--data", default=None, help="dataset directory (default <out>/dataset)")
    p.add_argument("--log-every", type=int, default=0)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--episodes", type=int, default=None)

    p = sub.add_parser("robust", help="corruption robustness sweep")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--proportions", type=float, nargs="+", default=list(DEFAULT_PROPORTIONS))

    p = sub.add_parser("sweep", help="branch-weight sensitivity sweep")
    _add_common(p)
    _train_overrides(p)
    p.add_argument("--data", default=None)
    p.add_argument("--lambda1-grid", type=float, nargs="+", default=list(DEFAULT_LAMBDA_GRID))
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--episodes", type=int, default=None)

    p = sub.add_parser("check", help="run the built-in correctness suite")
    p.add_argument("--draws", type=int, default=5, help="random shapes per primitive")
    return parser


def _resolve_config(args) -> RunConfig:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
        overrides["train.seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.out is not None:
        overrides["out_dir"] = args.out
    for name, key in (("order", "train.order"), ("lambda1", "train.lambda1"),
                      ("aux_loss", "train.aux_loss"), ("steps", "train.outer_steps"),
                      ("rounds", "eval.rounds"), ("episodes", "eval.episodes")):
        if getattr(args, name, None) is not None:
            overrides[key] = getattr(args, name)
    return load_run_config(args.config, overrides)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(cfg: RunConfig, args) -> "Pool":
    data_dir = Path(args.data) if args.data else Path(cfg.out_dir) / "dataset"
    if not data_dir.exists():
        raise PoolError(f"dataset directory not found: {data_dir} (run `metaux gen` first)")
    return load_pool(data_dir)


def cmd_gen(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    dataset_dir = out / "dataset"
    pool = generate_pool(cfg.data, cfg.seed)
    save_pool(pool, dataset_dir, cfg.seed)
    write_snapshot(cfg, out / "config.resolved.json")
    print(f"wrote {len(pool)} samples to {dataset_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    pool = _load_data(cfg, args)
    params, history = meta_train(pool, cfg.train, cfg.model, cfg.episode,
                                 threads=cfg.threads, log_every=args.log_every)
    (out / "checkpoint.bin").write_bytes(save_params(params))
    with (out / "history.jsonl").open("w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")
    write_snapshot(cfg, out / "config.resolved.json")
    print(f"trained {cfg.train.outer_steps} steps; checkpoint + history in {out}")
    return 0


def _load_checkpoint(cfg: RunConfig, path: str):
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    return load_params(p.read_bytes(), cfg.model)


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    pool = _load_data(cfg, args)
    params = _load_checkpoint(cfg, args.ckpt)
    rep = evaluate(params, pool, cfg.episode, cfg.eval.episodes, cfg.eval.rounds,
                   cfg.train, cfg.model, threads=cfg.threads)
    rows = [rep.as_dict()]
    write_table_csv(rows, out / "metrics.csv")
    write_table_json(rows, out / "metrics.json")
    write_snapshot(cfg, out / "config.resolved.json")
    print(f"accuracy={rep.accuracy:.4f} +-{rep.accuracy_ci95:.4f} "
          f"macro_f1={rep.macro_f1:.4f} uar={rep.uar:.4f} ({rep.rounds} rounds)")
    return 0


def cmd_robust(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    pool = _load_data(cfg, args)
    params = _load_checkpoint(cfg, args.ckpt)
    rows = robustness_sweep(params, pool, cfg.episode, cfg.train, cfg.model,
                            proportions=tuple(args.proportions),
                            num_episodes=cfg.eval.episodes, rounds=cfg.eval.rounds,
                            threads=cfg.threads)
    write_table_csv(rows, out / "robustness.csv")
    write_table_json(rows, out / "robustness.json")
    write_snapshot(cfg, out / "config.resolved.json")
    for row in rows:
        print(f"p={row['proportion']:.1f} mean_acc={row['mean_accuracy']:.4f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    pool = _load_data(cfg, args)
    rows = lambda_sweep(pool, tuple(args.lambda1_grid), cfg.train, cfg.model, cfg.episode,
                        num_episodes=cfg.eval.episodes, rounds=cfg.eval.rounds,
                        threads=cfg.threads)
    write_table_csv(rows, out / "lambda_sweep.csv")
    write_table_json(rows, out / "lambda_sweep.json")
    write_snapshot(cfg, out / "config.resolved.json")
    for row in rows:
        print(f"lambda1={row['lambda1']:.2f} acc={row['accuracy']:.4f} "
              f"+-{row['accuracy_ci95']:.4f}")
    return 0


def cmd_check(args) -> int:
    results = run_checks(gradcheck_draws=args.draws)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  {r.detail}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        print(f"failing: {', '.join(r.name for r in failed)}", file=sys.stderr)
        return 1
    return 0


_HANDLERS = {
    "gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
    "robust": cmd_robust, "sweep": cmd_sweep, "check": cmd_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (ConfigError, CheckpointError, PoolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MetauxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
