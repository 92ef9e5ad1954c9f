"""Command-line front end.

Subcommands cover the whole pipeline: gen-data, coldstart, train, eval,
rollout. One JSON config file can drive every stage; command-line flags
override file values. Every command that writes artifacts drops a
config_echo.json next to them. Exit codes: 0 success, 2 configuration
error, 3 numeric abort during optimization.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import coldstart, data, evaluation, grpo, policy, rollout
from .grpo import ConfigError, NumericAbort
from .rewards import RemoteJudge, RewardWeights


def _load_tasks(path: Path) -> list[data.Task]:
    if not path.exists():
        raise ConfigError("<data>", f"no such file: {path}")
    return data.read_tasks(path)


def _load_checkpoint(path_str: str) -> policy.PolicyParams:
    path = Path(path_str)
    if not path.exists():
        raise ConfigError("checkpoint", f"no such file: {path}")
    return policy.load_params(path)


def _echo(out_dir: Path, obj: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    grpo.write_config_echo(obj, out_dir)


def cmd_gen_data(args) -> int:
    if args.train_size < 1 or args.eval_size < 1:
        raise ConfigError("train-size/eval-size", "must be >= 1")
    if args.difficulty not in data.DIFFICULTIES:
        raise ConfigError("difficulty", f"must be one of {data.DIFFICULTIES}")
    if args.seed + args.train_size > data.EVAL_SEED_BASE:
        raise ConfigError("train-size",
                          "train seed range would collide with the eval range")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = data.gen_split(args.seed, args.train_size, args.difficulty)
    evals = data.gen_split(data.EVAL_SEED_BASE + args.seed, args.eval_size,
                           args.difficulty)
    data.write_tasks(out_dir / "train.jsonl", train)
    data.write_tasks(out_dir / "eval.jsonl", evals)
    _echo(out_dir, {"command": "gen-data", "train_size": args.train_size,
                    "eval_size": args.eval_size, "difficulty": args.difficulty,
                    "seed": args.seed})
    print(f"wrote {len(train)} train and {len(evals)} eval tasks to {out_dir}")
    return 0


def cmd_coldstart(args) -> int:
    tasks = _load_tasks(Path(args.data_dir) / "train.jsonl")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not 0.0 <= args.teacher_strength <= 1.0:
        raise ConfigError("teacher-strength", "must be within [0, 1]")

    params = policy.init_params(args.seed)
    params, bc_losses = coldstart.bc_train(params, tasks, args.bc_epochs,
                                           args.bc_lr, args.batch_size,
                                           args.seed, args.lr_decay)
    records, retention = coldstart.build_sc_data(tasks, args.teacher_strength,
                                                 args.sc_threshold, args.seed)
    coldstart.write_sc_records(out_dir / "sc_data.jsonl", records)
    tasks_by_id = {t.task_id: t for t in tasks}
    params, sc_losses = coldstart.bc_train_multiturn(
        params, records, tasks_by_id, args.sc_epochs, args.sc_lr,
        args.batch_size, args.seed, args.lr_decay)
    policy.save_params(params, out_dir / "coldstart.ckpt")

    stats = {
        "bc_steps": len(bc_losses),
        "bc_final_nll": bc_losses[-1] if bc_losses else None,
        "sc_records": len(records),
        "sc_retention": retention,
        "sc_steps": len(sc_losses),
        "sc_final_nll": sc_losses[-1] if sc_losses else None,
    }
    with open(out_dir / "stats.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(stats, sort_keys=True, indent=2) + "\n")
    _echo(out_dir, {"command": "coldstart", "seed": args.seed,
                    "bc_epochs": args.bc_epochs, "bc_lr": args.bc_lr,
                    "sc_epochs": args.sc_epochs, "sc_lr": args.sc_lr,
                    "batch_size": args.batch_size, "lr_decay": args.lr_decay,
                    "teacher_strength": args.teacher_strength,
                    "sc_threshold": args.sc_threshold})
    print(f"cold start done: retention {retention:.3f}, "
          f"{len(records)} correction records, checkpoint in {out_dir}")
    return 0


_TRAIN_OVERRIDES = ("seed", "threads", "lr", "batch_size", "group_size",
                    "alpha", "beta", "temperature", "eval_every")


def cmd_train(args) -> int:
    overrides = {name: getattr(args, name) for name in _TRAIN_OVERRIDES}
    if args.config:
        config = grpo.load_config(args.config, overrides)
    else:
        config = grpo.config_from_dict({}, overrides)
    train_tasks = _load_tasks(Path(args.data_dir) / "train.jsonl")
    eval_path = Path(args.data_dir) / "eval.jsonl"
    eval_tasks = _load_tasks(eval_path) if eval_path.exists() else []
    if args.checkpoint:
        params = _load_checkpoint(args.checkpoint)
    else:
        params = policy.init_params(config.seed)
    grpo.train(config, params, train_tasks, eval_tasks, args.out_dir)
    print(f"training done, artifacts in {args.out_dir}")
    return 0


def cmd_eval(args) -> int:
    tasks = _load_tasks(Path(args.data))
    params = _load_checkpoint(args.checkpoint)
    try:
        RewardWeights(args.alpha, args.beta)
    except ValueError as exc:
        raise ConfigError("alpha/beta", str(exc)) from exc
    cfg = evaluation.EvalConfig(
        turns=args.turns, temperature=args.temperature, alpha=args.alpha,
        beta=args.beta, judge_threshold=args.judge_improve_threshold,
        repeated_exact=args.repeated_exact, threads=args.threads,
        master_seed=args.seed)
    if not 1 <= cfg.turns <= rollout.MAX_TURNS:
        raise ConfigError("turns", f"must be within 1..{rollout.MAX_TURNS}")
    judge = None
    if args.judge_url:
        judge = RemoteJudge(args.judge_url, args.judge_timeout_ms)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = evaluation.evaluate(params, tasks, cfg, judge,
                                 out_dir / "trajectories.jsonl")
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(evaluation.report_to_dict(report), sort_keys=True,
                            indent=2) + "\n")
    table = evaluation.report_to_table(report)
    with open(out_dir / "report.tsv", "w", encoding="utf-8") as fh:
        fh.write(table)
    _echo(out_dir, {"command": "eval", "turns": args.turns,
                    "temperature": args.temperature, "alpha": args.alpha,
                    "beta": args.beta, "judge_url": args.judge_url,
                    "judge_timeout_ms": args.judge_timeout_ms,
                    "judge_improve_threshold": args.judge_improve_threshold,
                    "repeated_exact": args.repeated_exact,
                    "threads": args.threads, "seed": args.seed})
    if judge is not None and judge.fallback_count:
        print(f"judge fallbacks: {judge.fallback_count}", file=sys.stderr)
    sys.stdout.write(table)
    return 0


def cmd_rollout(args) -> int:
    tasks = _load_tasks(Path(args.data))
    params = _load_checkpoint(args.checkpoint)
    by_id = {t.task_id: t for t in tasks}
    if args.task_id not in by_id:
        raise ConfigError("task-id", f"not in {args.data}: {args.task_id}")
    if not 1 <= args.turns <= rollout.MAX_TURNS:
        raise ConfigError("turns", f"must be within 1..{rollout.MAX_TURNS}")
    sampling = rollout.SamplingConfig(args.temperature)
    traj = rollout.infer_multi(params, by_id[args.task_id], args.turns,
                               RewardWeights(args.alpha, args.beta), sampling,
                               args.seed)
    record = rollout.trajectory_to_json(traj, "infer", args.seed)
    line = json.dumps(record, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(line + "\n")
    else:
        print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chartrl",
        description="Multi-turn self-correction RL on a miniature chart language")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate train/eval task splits")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--train-size", type=int, default=data.DEFAULT_TRAIN_SIZE)
    p.add_argument("--eval-size", type=int, default=data.DEFAULT_EVAL_SIZE)
    p.add_argument("--difficulty", default="medium")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("coldstart", help="imitation pre-training")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bc-epochs", type=int, default=40)
    p.add_argument("--bc-lr", type=float, default=5e-3)
    p.add_argument("--sc-epochs", type=int, default=12)
    p.add_argument("--sc-lr", type=float, default=2e-3)
    p.add_argument("--lr-decay", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--teacher-strength", type=float, default=1.0)
    p.add_argument("--sc-threshold", type=float, default=coldstart.SC_THRESHOLD)
    p.set_defaults(func=cmd_coldstart)

    p = sub.add_parser("train", help="staged group-relative RL")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--checkpoint", help="initial parameters")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--group-size", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--eval-every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out multi-turn evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--turns", type=int, default=2)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--alpha", type=float, default=0.8)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--judge-url")
    p.add_argument("--judge-timeout-ms", type=int, default=2000)
    p.add_argument("--judge-improve-threshold", type=float, default=0.1)
    p.add_argument("--repeated-exact", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rollout", help="roll out one task and print the trajectory")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task-id", required=True)
    p.add_argument("--turns", type=int, default=2)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--alpha", type=float, default=0.8)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_rollout)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
