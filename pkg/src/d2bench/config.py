"""Run configuration files.

A run is described by a TOML file with these tables (all optional except
``run.task``)::

    [run]
    task = "sorted"          # sorted | copy | mini_countdown | marker
    seed = 0
    out = "runs/sorted"
    init = "ref.d2ck"        # optional starting checkpoint
    eval_samples = 128       # prompts used by the eval subcommand

    [task]                   # keyword arguments of the task constructor
    length = 8

    [model]                  # ModelConfig fields; vocabulary comes from the task
    d_model = 32
    n_layers = 2

    [trainer]                # TrainerConfig fields (task and seed come from [run])
    estimator = "stepmerge"
    N = 2

    [sweep]                  # dn-sweep settings
    Ns = [1, 2, 4, 8]
    samples = 256
    T = 8
    k = 1
    generator = "bidirectional"

The environment variables ``D2_OUT`` and ``D2_SEED`` override ``run.out`` and
``run.seed``; nothing else is read from the environment.
"""

from __future__ import annotations

import os
import sys
from dataclasses import asdict, dataclass, field, fields

from .model import ModelConfig
from .rltrain import TrainerConfig
from .tasks import TASKS, Task, get_task

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class SweepConfig:
    Ns: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    samples: int = 256
    T: int | None = None
    k: int | None = 1
    generator: str = "bidirectional"
    temperature: float = 1.0


@dataclass
class RunConfig:
    task: str
    seed: int = 0
    out: str = "runs/default"
    init: str | None = None
    eval_samples: int = 128
    task_args: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def make_task(self) -> Task:
        return get_task(self.task, **self.task_args)

    def model_config(self) -> ModelConfig:
        return self.make_task().model_config(**self.model)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainer"] = self.trainer.to_dict()
        return d


_RUN_KEYS = {"task", "seed", "out", "init", "eval_samples"}


def _check_keys(table: dict, allowed: set, where: str) -> None:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")


def from_mapping(raw: dict) -> RunConfig:
    _check_keys(raw, {"run", "task", "model", "trainer", "sweep"}, "config")
    run = dict(raw.get("run", {}))
    _check_keys(run, _RUN_KEYS, "run")
    if "task" not in run:
        raise ConfigError("run.task is required")
    if run["task"] not in TASKS:
        raise ConfigError(f"run.task: unknown task {run['task']!r}; choose from {sorted(TASKS)}")
    model = dict(raw.get("model", {}))
    _check_keys(model, {f.name for f in fields(ModelConfig)} - {"vocab_size", "n_output"}, "model")
    trainer_raw = dict(raw.get("trainer", {}))
    _check_keys(trainer_raw, {f.name for f in fields(TrainerConfig)} - {"task", "seed"}, "trainer")
    sweep_raw = dict(raw.get("sweep", {}))
    _check_keys(sweep_raw, {f.name for f in fields(SweepConfig)}, "sweep")
    seed = int(run.get("seed", 0))
    try:
        trainer = TrainerConfig(task=run["task"], seed=seed, **trainer_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"trainer: {exc}") from None
    cfg = RunConfig(
        task=run["task"],
        seed=seed,
        out=str(run.get("out", "runs/default")),
        init=run.get("init"),
        eval_samples=int(run.get("eval_samples", 128)),
        task_args=dict(raw.get("task", {})),
        model=model,
        trainer=trainer,
        sweep=SweepConfig(**sweep_raw),
    )
    try:
        cfg.model_config()
    except TypeError as exc:
        raise ConfigError(f"task: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None
    return cfg


def with_overrides(cfg: RunConfig, seed: int | None = None, out: str | None = None,
                   estimator: str | None = None) -> RunConfig:
    env_seed, env_out = os.environ.get("D2_SEED"), os.environ.get("D2_OUT")
    if env_seed is not None and seed is None:
        seed = int(env_seed)
    if env_out is not None and out is None:
        out = env_out
    if seed is not None:
        cfg.seed = seed
        cfg.trainer.seed = seed
    if out is not None:
        cfg.out = out
    if estimator is not None:
        d = cfg.trainer.to_dict()
        d["estimator"] = estimator
        try:
            cfg.trainer = TrainerConfig(**d)
        except ValueError as exc:
            raise ConfigError(f"--estimator: {exc}") from None
    return cfg


def load(path) -> RunConfig:
    with open(path, "rb") as f:
        try:
            raw = tomllib.load(f)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return from_mapping(raw)
