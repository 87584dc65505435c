"""Command line entry point: ``d2bench {train,eval,sample,dn-sweep,verify}``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, config as runconfig
from .decoding import make_schedule
from .likelihood import dn_sweep, is_non_increasing, sample_trajectories, write_dn_csv
from .model import init_params
from .oracle import verification_suite
from .plotting import line_svg
from .rltrain import TrainerConfig, evaluate, train
from .tasks import TASKS, get_task


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def _out_dir(args, cfg=None) -> Path:
    out = args.out or os.environ.get("D2_OUT") or (cfg.out if cfg is not None else "d2_out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _seed(args, default: int = 0) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("D2_SEED")
    return int(env) if env is not None else default


def _meta(cfg: runconfig.RunConfig, step: int) -> dict:
    return {"task": cfg.task, "task_args": cfg.task_args, "trainer": cfg.trainer.to_dict(), "step": step}


def _from_checkpoint(args):
    """Params plus the run description stored alongside them (a --config wins)."""
    if not args.checkpoint:
        raise runconfig.ConfigError("--checkpoint is required")
    params, meta = checkpoint.load(args.checkpoint)
    if args.config:
        cfg = runconfig.load(args.config)
        task, trainer = cfg.make_task(), cfg.trainer
    else:
        cfg = None
        if meta.get("task") not in TASKS:
            raise runconfig.ConfigError("checkpoint metadata names no known task; pass --config")
        task = get_task(meta["task"], **meta.get("task_args", {}))
        trainer = TrainerConfig.from_dict(meta.get("trainer", {"task": meta["task"]}))
    return params, task, trainer, cfg


def cmd_train(args) -> int:
    if not args.config:
        raise runconfig.ConfigError("--config is required")
    cfg = runconfig.with_overrides(runconfig.load(args.config), args.seed, args.out, args.estimator)
    out = _out_dir(args, cfg)
    task = cfg.make_task()
    if cfg.init:
        params, _ = checkpoint.load(cfg.init)
    else:
        params = init_params(cfg.model_config(), np.random.default_rng([cfg.seed, 7]))
    (out / "config.json").write_text(_dumps(cfg.to_dict()) + "\n")
    metrics = open(out / "metrics.jsonl", "w")

    def on_record(rec, state):
        metrics.write(_dumps(rec) + "\n")
        metrics.flush()
        checkpoint.save(out / f"step_{state.step:06d}.d2ck", state.params, _meta(cfg, state.step))

    try:
        state = train(cfg.trainer, task, params, on_record=on_record)
    finally:
        metrics.close()
    checkpoint.save(out / "final.d2ck", state.params, _meta(cfg, state.step))
    recs = state.records
    report = {"steps": state.step, "flops": int(state.flops),
              "initial_reward": recs[0]["mean_reward"], "final_reward": recs[-1]["mean_reward"]}
    (out / "report.json").write_text(_dumps(report) + "\n")
    line_svg(out / "reward.svg", [r["flops"] for r in recs], [r["mean_reward"] for r in recs],
             "cumulative FLOPs", "mean reward", f"{cfg.task} / {cfg.trainer.estimator}")
    print(_dumps(report))
    return 0


def cmd_eval(args) -> int:
    params, task, trainer, cfg = _from_checkpoint(args)
    seed = _seed(args, trainer.seed)
    n = args.samples if args.samples is not None else (cfg.eval_samples if cfg else 128)
    reward = evaluate(params, task, trainer, n_prompts=n, seed=seed)
    rec = {"checkpoint": str(args.checkpoint), "samples": n, "seed": seed, "mean_reward": reward}
    out = _out_dir(args, cfg)
    (out / "eval.json").write_text(_dumps(rec) + "\n")
    print(_dumps(rec))
    return 0


def cmd_sample(args) -> int:
    params, task, trainer, cfg = _from_checkpoint(args)
    seed = _seed(args, trainer.seed)
    n = args.samples if args.samples is not None else 16
    out = _out_dir(args, cfg)
    template = make_schedule(task.length, trainer.T, trainer.k, trainer.policy, np.random.default_rng(0))
    trajs = []
    if n > 0:
        trajs = sample_trajectories(params, task.sample_prompt, template, n, np.random.default_rng(seed),
                                    trainer.generator, trainer.temperature)
    with open(out / "samples.jsonl", "w") as f:
        for t in trajs:
            f.write(t.to_json() + "\n")
    print(_dumps({"samples": n, "file": str(out / "samples.jsonl")}))
    return 0


def cmd_dn_sweep(args) -> int:
    params, task, _, cfg = _from_checkpoint(args)
    sweep = cfg.sweep if cfg else runconfig.SweepConfig()
    seed = _seed(args, cfg.seed if cfg else 0)
    n = args.samples if args.samples is not None else sweep.samples
    Ns = [int(x) for x in args.n_list.split(",")] if args.n_list else list(sweep.Ns)
    T = sweep.T or task.length
    template = make_schedule(task.length, T, sweep.k, "random", np.random.default_rng(0))
    trajs = sample_trajectories(params, task.sample_prompt, template, n, np.random.default_rng(seed),
                                sweep.generator, sweep.temperature)
    rows = dn_sweep(params, trajs, Ns)
    out = _out_dir(args, cfg)
    write_dn_csv(out / "dn_sweep.csv", rows)
    line_svg(out / "dn_sweep.svg", [r.N for r in rows], [r.D_N for r in rows], "N (segments)",
             "D_N (nats)", yerr=[2 * r.stderr for r in rows], logx=True)
    summary = {"Ns": Ns, "D_N": [r.D_N for r in rows], "stderr": [r.stderr for r in rows],
               "non_increasing_2se": is_non_increasing(rows)}
    print(_dumps(summary))
    return 0


def cmd_verify(args) -> int:
    report = verification_suite(seed=_seed(args))
    out = _out_dir(args)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0 if report["all_passed"] else 1


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "dn-sweep": cmd_dn_sweep,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="d2bench", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int, help="overrides run.seed and D2_SEED")
        p.add_argument("--out", help="output directory (overrides run.out and D2_OUT)")
        p.add_argument("--checkpoint", help="a .d2ck parameter file")
        p.add_argument("--samples", type=int, help="number of prompts / trajectories")
        p.add_argument("--estimator", choices=("full", "stepmerge", "anyorder"))
        if name == "dn-sweep":
            p.add_argument("--n-list", help="comma separated segment counts, e.g. 1,2,4,8")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (runconfig.ConfigError, checkpoint.CheckpointError, FileNotFoundError) as exc:
        print(f"d2bench {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
