"""Group-relative policy optimisation for the diffusion policy.

One outer step samples ``batch_prompts`` prompts with ``G`` trajectories each
from the current policy, freezes it as ``old``, caches old and reference
per-token log-probabilities under the chosen estimator, then takes
``inner_updates`` optimiser steps on the same trajectories.

The trajectories are reused across the inner updates, so after the first
update the ratio is taken against a policy that no longer generated them.
That is the usual stale-sample approximation and is not corrected here.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import diffmath as dm
from .decoding import Trajectory, make_schedule, sample_batch
from .likelihood import token_logprobs
from .model import ModelConfig, ModelParams, forward_flops, init_params
from .tasks import Task

ADVANTAGE_MODES = ("mean_only", "mean_std")
TRAIN_ESTIMATORS = ("full", "stepmerge", "anyorder")
OPTIMIZERS = ("adam", "sgd")


class TrainingError(RuntimeError):
    pass


def compute_advantages(rewards, mode: str = "mean_only") -> tuple[np.ndarray, bool]:
    """Group-relative advantages and whether the std guard zeroed them."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    if mode not in ADVANTAGE_MODES:
        raise ValueError(f"unknown advantage mode {mode!r}")
    centred = r - r.mean()
    if mode == "mean_only":
        return centred, False
    std = r.std()  # population std
    if std < 1e-8:
        return np.zeros_like(r), True
    return centred / std, False


@dataclass
class GroupBatch:
    prompt: np.ndarray
    trajectories: list[Trajectory]
    rewards: np.ndarray
    advantages: np.ndarray
    old_logp: np.ndarray | None = None
    ref_logp: np.ndarray | None = None
    std_guard: bool = False

    def __post_init__(self):
        if len(self.trajectories) < 2:
            raise ValueError("a group needs G >= 2 trajectories")


@dataclass
class TrainerConfig:
    task: str = "sorted"
    G: int = 8
    batch_prompts: int = 2
    inner_updates: int = 2
    clip_eps: float = 0.2
    beta: float = 0.01
    advantage_norm: str = "mean_only"
    estimator: str = "stepmerge"
    N: int = 2
    lr: float = 3e-4
    optimizer: str = "adam"
    temperature: float = 1.0
    sampler: str = "bidirectional"   # overridden to any_order for the anyorder estimator
    T: int = 4
    k: int | None = 2
    policy: str = "random"
    seed: int = 0
    flop_budget: float = 1e9
    eval_interval: float = 1e8
    eval_prompts: int = 64
    max_steps: int | None = None

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.inner_updates < 1:
            raise ValueError("inner_updates must be >= 1")
        if self.G < 2:
            raise ValueError("G must be >= 2")
        if self.advantage_norm not in ADVANTAGE_MODES:
            raise ValueError(f"advantage_norm must be one of {ADVANTAGE_MODES}")
        if self.estimator not in TRAIN_ESTIMATORS:
            raise ValueError(f"estimator must be one of {TRAIN_ESTIMATORS}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")

    @property
    def generator(self) -> str:
        return "any_order" if self.estimator == "anyorder" else self.sampler

    def likelihood_args(self) -> tuple[str, int | None]:
        if self.estimator == "anyorder":
            return "oneshot", None
        if self.estimator == "stepmerge":
            return "stepmerge", self.N
        return "full", None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown trainer field(s): {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# losses


def clipped_surrogate(logp_new: dm.Array, logp_old: np.ndarray, advantages: np.ndarray, eps: float) -> dm.Array:
    """Per-token ``min(rho A, clip(rho, 1-eps, 1+eps) A)`` with ``rho = exp(new - old)``."""
    n, L = logp_new.shape
    adv = np.broadcast_to(np.asarray(advantages, dtype=np.float64)[:, None], (n, L))
    rho = dm.exp(dm.sub(logp_new, dm.Array(np.asarray(logp_old, dtype=np.float64))))
    return dm.minimum(dm.mul(rho, adv), dm.mul(dm.clip(rho, 1.0 - eps, 1.0 + eps), adv))


def kl_terms(logp_new: dm.Array, logp_ref: np.ndarray) -> dm.Array:
    """Per-token ``exp(d) - d - 1`` with ``d = log pi_ref - log pi_theta``."""
    delta = dm.sub(dm.Array(np.asarray(logp_ref, dtype=np.float64)), logp_new)
    return dm.sub(dm.sub(dm.exp(delta), delta), dm.Array(np.ones(delta.shape)))


def _stack(batches: Sequence[GroupBatch], attr: str) -> np.ndarray:
    parts = [getattr(b, attr) for b in batches]
    if any(p is None for p in parts):
        raise TrainingError(f"GroupBatch.{attr} cache is missing")
    return np.concatenate(parts)


def grpo_loss(params: ModelParams, batches: Sequence[GroupBatch], config: TrainerConfig) -> tuple[dm.Array, dict]:
    """Clipped surrogate plus KL penalty, averaged over tokens then trajectories."""
    trajs = [t for b in batches for t in b.trajectories]
    old = _stack(batches, "old_logp")
    adv = np.concatenate([b.advantages for b in batches])
    est, N = config.likelihood_args()
    logp = token_logprobs(params, trajs, est, N)
    n, L = logp.shape
    terms = clipped_surrogate(logp, old, adv, config.clip_eps)
    loss = dm.scale(dm.sum(terms), -1.0 / (n * max(L, 1)))
    kl_value = 0.0
    if config.beta > 0:
        ref = _stack(batches, "ref_logp")
        kl = dm.scale(dm.sum(kl_terms(logp, ref)), 1.0 / (n * max(L, 1)))
        kl_value = kl.item()
        loss = dm.add(loss, dm.scale(kl, config.beta))
    rho = np.exp(logp.values - old)
    stats = {
        "kl": kl_value,
        "clip_fraction": float(np.mean(np.abs(rho - 1.0) > config.clip_eps)) if rho.size else 0.0,
    }
    return loss, stats


def kl_penalty(params: ModelParams, batch: GroupBatch, config: TrainerConfig) -> float:
    """Token-averaged KL estimate of the policy against the cached reference."""
    if batch.ref_logp is None:
        raise TrainingError("GroupBatch.ref_logp cache is missing")
    est, N = config.likelihood_args()
    logp = token_logprobs(params, batch.trajectories, est, N)
    n, L = logp.shape
    return float(kl_terms(logp, batch.ref_logp).values.sum() / (n * max(L, 1)))


# ---------------------------------------------------------------------------
# optimisers


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, a in params.arrays.items():
            if a.grad is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(a.values))
            v = self.v.setdefault(name, np.zeros_like(a.values))
            m *= self.beta1
            m += (1.0 - self.beta1) * a.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * a.grad**2
            a.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ModelParams) -> None:
        for a in params.arrays.values():
            if a.grad is not None:
                a.values -= self.lr * a.grad


def make_optimizer(config: TrainerConfig):
    return Adam(config.lr) if config.optimizer == "adam" else SGD(config.lr)


# ---------------------------------------------------------------------------
# FLOP accounting


def estimate_flops(config: ModelConfig, seq_len: int, n_sequences: int = 1, backward: bool = False) -> int:
    """Analytic matmul FLOPs for ``n_sequences`` passes; backward costs twice the forward."""
    f = forward_flops(config, seq_len) * n_sequences
    return 3 * f if backward else f


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainState:
    params: ModelParams
    old: ModelParams
    ref: ModelParams
    step: int = 0
    flops: int = 0
    records: list[dict] = field(default_factory=list)


def _sample_groups(state: TrainState, task: Task, config: TrainerConfig) -> list[GroupBatch]:
    L = task.length
    prompts, scheds, rngs = [], [], []
    group_prompts = []
    for b in range(config.batch_prompts):
        prompt = task.sample_prompt(np.random.default_rng([config.seed, state.step, b, 0]))
        group_prompts.append(prompt)
        for g in range(config.G):
            rng = np.random.default_rng([config.seed, state.step, b, g + 1])
            prompts.append(prompt)
            scheds.append(make_schedule(L, config.T, config.k, config.policy, rng))
            rngs.append(rng)
    trajs = sample_batch(state.old, prompts, scheds, config.generator, config.temperature, rngs)
    groups = []
    for b, prompt in enumerate(group_prompts):
        members = trajs[b * config.G:(b + 1) * config.G]
        r = np.array([task.reward(prompt, t.tokens) for t in members])
        adv, guard = compute_advantages(r, config.advantage_norm)
        groups.append(GroupBatch(prompt, members, r, adv, std_guard=guard))
    return groups


def _fill_caches(state: TrainState, groups: Sequence[GroupBatch], config: TrainerConfig) -> None:
    est, N = config.likelihood_args()
    trajs = [t for g in groups for t in g.trajectories]
    old = token_logprobs(state.old, trajs, est, N).values
    ref = token_logprobs(state.ref, trajs, est, N).values if config.beta > 0 else None
    G = config.G
    for i, g in enumerate(groups):
        g.old_logp = old[i * G:(i + 1) * G].copy()
        g.ref_logp = None if ref is None else ref[i * G:(i + 1) * G].copy()


def evaluate(params: ModelParams, task: Task, config: TrainerConfig, n_prompts: int | None = None,
             seed: int | None = None) -> float:
    """Mean reward on a fixed set of prompts and sampler streams (not counted as training FLOPs)."""
    n = config.eval_prompts if n_prompts is None else n_prompts
    if n == 0:
        return 0.0
    seed = config.seed if seed is None else seed
    rngs = [np.random.default_rng([seed, 2**31 - 1, i]) for i in range(n)]
    prompts = [task.sample_prompt(r) for r in rngs]
    scheds = [make_schedule(task.length, config.T, config.k, config.policy, r) for r in rngs]
    saved = (dm.FLOPS.forward, dm.FLOPS.backward)
    trajs = []
    for s in range(0, n, 64):
        trajs += sample_batch(params, prompts[s:s + 64], scheds[s:s + 64], config.generator,
                              config.temperature, rngs[s:s + 64])
    dm.FLOPS.forward, dm.FLOPS.backward = saved
    return float(np.mean([task.reward(p, t.tokens) for p, t in zip(prompts, trajs)]))


def _dump(groups: Sequence[GroupBatch]) -> str:
    return json.dumps([{
        "prompt": g.prompt.tolist(),
        "rewards": g.rewards.tolist(),
        "advantages": g.advantages.tolist(),
        "trajectories": [json.loads(t.to_json()) for t in g.trajectories],
    } for g in groups])


def train_step(state: TrainState, task: Task, config: TrainerConfig, optimizer) -> dict:
    """One outer iteration; returns the last inner update's statistics."""
    start = dm.FLOPS.total
    state.old = state.params.snapshot("old")
    groups = _sample_groups(state, task, config)
    _fill_caches(state, groups, config)
    stats = {}
    for _ in range(config.inner_updates):
        state.params.zero_grad()
        try:
            with dm.Tape() as tape:
                loss, stats = grpo_loss(state.params, groups, config)
                tape.backward(loss)
        except dm.NonFiniteError as exc:
            raise TrainingError(f"non-finite loss at step {state.step}: {exc}\nbatch: {_dump(groups)}") from exc
        stats["loss"] = loss.item()
        optimizer.step(state.params)
    state.params.zero_grad()
    state.step += 1
    state.flops += dm.FLOPS.total - start
    stats["train_reward"] = float(np.mean(np.concatenate([g.rewards for g in groups])))
    return stats


def train(
    config: TrainerConfig,
    task: Task,
    params: ModelParams | None = None,
    model_config: ModelConfig | None = None,
    on_record: Callable[[dict, TrainState], None] | None = None,
) -> TrainState:
    """Run until the FLOP budget (or ``max_steps``) is spent.

    ``params`` is the starting policy and the frozen reference; a fresh
    initialisation seeded by ``config.seed`` is used when omitted.  A metrics
    record is emitted at step 0, whenever cumulative FLOPs cross the next
    multiple of ``eval_interval``, and at the end.
    """
    if params is None:
        mc = model_config or task.model_config()
        params = init_params(mc, np.random.default_rng([config.seed, 7]))
    params = params.copy()
    params.role = "policy"
    state = TrainState(params, params.snapshot("old"), params.snapshot("ref"))
    optimizer = make_optimizer(config)

    def emit(stats: dict | None) -> None:
        rec = {
            "step": state.step,
            "flops": int(state.flops),
            "mean_reward": evaluate(state.params, task, config),
            "loss": None if stats is None else stats["loss"],
            "kl": None if stats is None else stats["kl"],
            "clip_fraction": None if stats is None else stats["clip_fraction"],
        }
        state.records.append(rec)
        if on_record is not None:
            on_record(rec, state)

    emit(None)
    next_eval = config.eval_interval
    stats = None
    stats_emitted = False
    while state.flops < config.flop_budget and (config.max_steps is None or state.step < config.max_steps):
        stats = train_step(state, task, config, optimizer)
        if state.flops >= next_eval:
            emit(stats)
            while next_eval <= state.flops:
                next_eval += config.eval_interval
            stats_emitted = True
        else:
            stats_emitted = False
    if stats is not None and not stats_emitted:
        emit(stats)
    return state


def reward_at_budget(records: Sequence[dict], flops: float) -> float:
    """Mean reward of the last record whose cumulative FLOPs do not exceed ``flops``."""
    eligible = [r for r in records if r["flops"] <= flops]
    return eligible[-1]["mean_reward"] if eligible else math.nan
