"""Denoising pre-training on task demonstrations.

Two objectives, one per attention discipline:

* ``bidirectional``: mask each completion token with a probability drawn
  uniformly per example and score the masked tokens under full attention;
* ``any_order``: draw a random unmasking schedule and score every token with
  the one-shot any-order layout, i.e. the exact trajectory log-likelihood of
  the demonstration under that order.

Both produce a model whose full per-step trajectory likelihood can be
measured on held-out demonstrations with the matching generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .decoding import GENERATORS, Trajectory, make_schedule
from .likelihood import batch_loglik, token_logprobs
from .model import ModelParams, build_bidirectional_mask, default_positions, forward
from .rltrain import Adam
from .tasks import Task


@dataclass
class PretrainLog:
    steps: list[int] = field(default_factory=list)
    heldout: list[float] = field(default_factory=list)


def demo_trajectories(task: Task, n: int, T: int, k: int | None, rng: np.random.Generator,
                      generator: str) -> list[Trajectory]:
    """Demonstrations wrapped as trajectories with random unmasking orders."""
    out = []
    for _ in range(n):
        prompt, comp = task.sample_data(rng)
        ds = make_schedule(task.length, T, k, "random", rng).decode_step()
        out.append(Trajectory(prompt, comp, ds, np.zeros(task.length), T, generator))
    return out


def _bidirectional_loss(params: ModelParams, task: Task, batch: int, rng: np.random.Generator) -> dm.Array:
    LP, L = task.prompt_len, task.length
    S = LP + L
    tokens = np.empty((batch, S), dtype=np.int64)
    targets = np.zeros((batch, S), dtype=np.int64)
    weights = np.zeros((batch, S))
    for i in range(batch):
        prompt, comp = task.sample_data(rng)
        ratio = rng.uniform(0.0, 1.0)
        hide = rng.random(L) < ratio
        if not hide.any():
            hide[rng.integers(L)] = True
        tokens[i, :LP] = prompt
        tokens[i, LP:] = np.where(hide, params.config.mask_id, comp)
        targets[i, LP:] = comp
        weights[i, LP:] = hide
    masks = np.broadcast_to(build_bidirectional_mask(LP, L), (batch, S, S))
    positions = np.broadcast_to(default_positions(S), (batch, S))
    logp = dm.gather(dm.log_softmax(forward(params, tokens, positions, masks)), targets)
    return dm.scale(dm.sum(dm.mul(logp, weights)), -1.0 / weights.sum())


def _any_order_loss(params: ModelParams, task: Task, batch: int, T: int, k, rng) -> dm.Array:
    trajs = demo_trajectories(task, batch, T, k, rng, "any_order")
    logp = token_logprobs(params, trajs, "oneshot")
    return dm.scale(dm.sum(logp), -1.0 / logp.size)


def heldout_loglik(params: ModelParams, trajs: list[Trajectory]) -> float:
    """Mean per-token full-decomposition log-likelihood."""
    return float(batch_loglik(params, trajs, "full").mean())


def pretrain(
    params: ModelParams,
    task: Task,
    generator: str,
    steps: int,
    rng: np.random.Generator,
    batch: int = 32,
    lr: float = 3e-3,
    T: int | None = None,
    k: int | None = None,
    heldout: list[Trajectory] | None = None,
    eval_every: int = 50,
    target: float | None = None,
) -> tuple[ModelParams, PretrainLog]:
    """Train in place with Adam; stop early once held-out LL reaches ``target``."""
    if generator not in GENERATORS:
        raise ValueError(f"unknown generator {generator!r}")
    T = task.length if T is None else T
    opt = Adam(lr)
    log = PretrainLog()
    for step in range(1, steps + 1):
        params.zero_grad()
        with dm.Tape() as tape:
            if generator == "bidirectional":
                loss = _bidirectional_loss(params, task, batch, rng)
            else:
                loss = _any_order_loss(params, task, batch, T, k, rng)
            tape.backward(loss)
        opt.step(params)
        if heldout is not None and (step % eval_every == 0 or step == steps):
            ll = heldout_loglik(params, heldout)
            log.steps.append(step)
            log.heldout.append(ll)
            if target is not None and ll >= target:
                break
    params.zero_grad()
    return params, log
