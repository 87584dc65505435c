"""Unmasking schedules, the two samplers, trajectories and the causality checker.

Time runs backwards: a schedule with ``T`` steps decodes ``U_{T-1}`` first and
``U_0`` last, and ``decode_step[l] = t_l`` records when position ``l`` was
unmasked.  ``Omega_l = {j : t_j > t_l}`` is everything decoded before ``l``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import (
    ModelParams,
    build_bidirectional_mask,
    build_decoding_mask,
    default_positions,
    forward,
)

GENERATORS = ("bidirectional", "any_order")
POLICIES = ("random", "top_confidence")


class ScheduleError(ValueError):
    pass


@dataclass
class DecodeSchedule:
    """Step sizes plus, for the random policy, the pre-drawn unmask sets.

    ``sizes[t]`` is ``|U_t|``.  ``unmask[t]`` holds the positions for step ``t``
    when fixed in advance; with ``top_confidence`` it is ``None`` and the
    sampler picks positions from the model's confidence.
    """

    L: int
    T: int
    k: int
    policy: str
    sizes: np.ndarray
    unmask: list[np.ndarray] | None = None

    def decode_step(self) -> np.ndarray:
        if self.unmask is None:
            raise ScheduleError("top_confidence schedules have no fixed decode steps")
        ds = np.full(self.L, -1, dtype=np.int64)
        for t, u in enumerate(self.unmask):
            ds[u] = t
        return ds

    def unmask_probability(self, t: int) -> float:
        """alpha_t: chance that a still-masked token unmasks at step t."""
        masked = int(self.sizes[: t + 1].sum())
        return float(self.sizes[t]) / masked


def step_sizes(L: int, T: int, k: int | None = None) -> np.ndarray:
    if L < 0 or T < 1:
        raise ScheduleError("need L >= 0 and T >= 1")
    if k is None:
        k = -(-L // T) if L else 1
    if k < 1 or k * T < L:
        raise ScheduleError(f"k*T = {k * T} cannot cover L = {L}")
    if L and (T - 1) * k >= L:
        raise ScheduleError(f"with k={k}, T={T} some step of an L={L} schedule would be empty")
    sizes = np.full(T, k, dtype=np.int64)
    sizes[0] = L - (T - 1) * k
    return sizes


def make_schedule(
    L: int,
    T: int,
    k: int | None = None,
    policy: str = "random",
    rng: np.random.Generator | None = None,
) -> DecodeSchedule:
    if policy not in POLICIES:
        raise ScheduleError(f"unknown selection policy {policy!r}")
    sizes = step_sizes(L, T, k)
    k = int(sizes[-1]) if T > 1 else int(sizes[0])
    if policy == "top_confidence":
        return DecodeSchedule(L, T, k, policy, sizes, None)
    rng = rng or np.random.default_rng()
    perm = rng.permutation(L)
    unmask = [None] * T
    start = 0
    for t in range(T - 1, -1, -1):
        unmask[t] = np.sort(perm[start:start + sizes[t]])
        start += sizes[t]
    return DecodeSchedule(L, T, k, policy, sizes, unmask)


def schedule_from_decode_steps(decode_step: Sequence[int], T: int) -> DecodeSchedule:
    ds = np.asarray(decode_step, dtype=np.int64)
    if ds.size and (ds.min() < 0 or ds.max() >= T):
        raise ScheduleError("decode steps must lie in [0, T)")
    unmask = [np.flatnonzero(ds == t) for t in range(T)]
    sizes = np.array([u.size for u in unmask], dtype=np.int64)
    return DecodeSchedule(ds.size, T, int(sizes.max(initial=0)), "random", sizes, unmask)


@dataclass
class Trajectory:
    prompt: np.ndarray
    tokens: np.ndarray
    decode_step: np.ndarray
    logprobs: np.ndarray
    T: int
    generator: str = "any_order"

    def __post_init__(self):
        self.prompt = np.asarray(self.prompt, dtype=np.int64)
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.decode_step = np.asarray(self.decode_step, dtype=np.int64)
        self.logprobs = np.asarray(self.logprobs, dtype=np.float64)
        if self.generator not in GENERATORS:
            raise ScheduleError(f"unknown generator {self.generator!r}")
        if self.tokens.shape != self.decode_step.shape:
            raise ScheduleError("tokens and decode_step lengths differ")
        if self.decode_step.size and (self.decode_step.min() < 0 or self.decode_step.max() >= self.T):
            raise ScheduleError("inconsistent decode_step map")

    @property
    def L(self) -> int:
        return int(self.tokens.size)

    @property
    def prompt_len(self) -> int:
        return int(self.prompt.size)

    def unmask_sets(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.decode_step == t) for t in range(self.T)]

    def omega(self, l: int) -> np.ndarray:
        return np.flatnonzero(self.decode_step > self.decode_step[l])

    def context(self, t: int, mask_id: int) -> np.ndarray:
        """Input tokens x_{t+1} (prompt included) seen by the pass producing step t."""
        comp = np.where(self.decode_step > t, self.tokens, mask_id)
        return np.concatenate([self.prompt, comp])

    def to_json(self) -> str:
        return json.dumps({
            "prompt": self.prompt.tolist(),
            "tokens": self.tokens.tolist(),
            "decode_step": self.decode_step.tolist(),
            "unmask_sets": [u.tolist() for u in self.unmask_sets()],
            "logprobs": self.logprobs.tolist(),
            "T": self.T,
            "generator": self.generator,
        })

    @classmethod
    def from_json(cls, text: str) -> "Trajectory":
        d = json.loads(text)
        traj = cls(d["prompt"], d["tokens"], d["decode_step"], d["logprobs"], d["T"], d["generator"])
        if "unmask_sets" in d and [u.tolist() for u in traj.unmask_sets()] != d["unmask_sets"]:
            raise ScheduleError("unmask_sets disagree with decode_step")
        return traj


def step_mask(generator: str, decode_step: np.ndarray, t: int, prompt_len: int) -> np.ndarray:
    if generator == "bidirectional":
        return build_bidirectional_mask(prompt_len, decode_step.size)
    return build_decoding_mask(decode_step, t, prompt_len)


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _draw(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    if temperature <= 0.0:
        return int(np.argmax(logits))
    z = logits / temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    return int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), p.size - 1))


def sample_batch(
    params: ModelParams,
    prompts: Sequence[np.ndarray],
    schedules: Sequence[DecodeSchedule],
    generator: str,
    temperature: float = 1.0,
    rngs: Sequence[np.random.Generator] | None = None,
) -> list[Trajectory]:
    """Decode several trajectories in lock-step, one batched forward per step.

    Each trajectory owns its schedule and rng stream, so results do not depend
    on how trajectories are grouped into batches.
    """
    if generator not in GENERATORS:
        raise ScheduleError(f"unknown generator {generator!r}")
    n = len(prompts)
    if not n:
        return []
    if len(schedules) != n:
        raise ScheduleError("one schedule per prompt required")
    rngs = rngs if rngs is not None else [np.random.default_rng() for _ in range(n)]
    cfg = params.config
    LP = len(prompts[0])
    L, T = schedules[0].L, schedules[0].T
    if any(len(p) != LP for p in prompts) or any(s.L != L or s.T != T for s in schedules):
        raise ScheduleError("batched sampling needs equal prompt lengths, L and T")
    S = LP + L
    tokens = np.full((n, L), -1, dtype=np.int64)
    ds = np.full((n, L), -1, dtype=np.int64)
    logp_rec = np.zeros((n, L))
    positions = np.broadcast_to(default_positions(S), (n, S))
    for t in range(T - 1, -1, -1):
        inp = np.empty((n, S), dtype=np.int64)
        masks = np.empty((n, S, S), dtype=bool)
        for i in range(n):
            inp[i, :LP] = prompts[i]
            inp[i, LP:] = np.where(ds[i] > t, tokens[i], cfg.mask_id)
            masks[i] = step_mask(generator, ds[i], t, LP)
        logits = _forward_values(params, inp, positions, masks)
        for i in range(n):
            lg = logits[i, LP:]
            sched = schedules[i]
            if sched.unmask is not None:
                chosen = sched.unmask[t]
            else:
                still = np.flatnonzero(ds[i] < 0)
                conf = _log_softmax_np(lg[still]).max(axis=-1)
                order = np.argsort(-conf, kind="stable")
                chosen = np.sort(still[order[: sched.sizes[t]]])
            lp = _log_softmax_np(lg[chosen])
            for j, l in enumerate(chosen):
                v = _draw(lg[l], temperature, rngs[i])
                tokens[i, l] = v
                logp_rec[i, l] = lp[j, v]
                ds[i, l] = t
    return [
        Trajectory(prompts[i], tokens[i], ds[i], logp_rec[i], T, generator)
        for i in range(n)
    ]


def _forward_values(params: ModelParams, tokens, positions, masks) -> np.ndarray:
    return forward(params, tokens, positions, masks).values


def sample_any_order(params, prompt, schedule, temperature=1.0, rng=None) -> Trajectory:
    return sample_batch(params, [np.asarray(prompt)], [schedule], "any_order", temperature, [rng or np.random.default_rng()])[0]


def sample_bidirectional(params, prompt, schedule, temperature=1.0, rng=None) -> Trajectory:
    return sample_batch(params, [np.asarray(prompt)], [schedule], "bidirectional", temperature, [rng or np.random.default_rng()])[0]


def trajectory_masks(traj: Trajectory) -> list[np.ndarray]:
    """The attention mask used at each step t (index t) when decoding ``traj``."""
    return [step_mask(traj.generator, traj.decode_step, t, traj.prompt_len) for t in range(traj.T)]


# ---------------------------------------------------------------------------
# any-order causality


@dataclass
class CausalityReport:
    reasonable: bool = True
    consistent: bool = True          # condition 1
    no_future_at_decode: bool = True  # condition 2
    no_future_after: bool = True      # condition 3
    witnesses: dict[str, list] = field(default_factory=lambda: {"reasonable": [], "1": [], "2": [], "3": []})

    @property
    def passed(self) -> bool:
        return self.consistent and self.no_future_at_decode and self.no_future_after

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "reasonable": self.reasonable,
            "condition_1": self.consistent,
            "condition_2": self.no_future_at_decode,
            "condition_3": self.no_future_after,
            "witnesses": self.witnesses,
        }


def check_any_order_causal(masks: Sequence[np.ndarray], decode_step, prompt_len: int = 0) -> CausalityReport:
    """Evaluate the three any-order causal conditions on per-step masks.

    ``masks[t]`` is the mask of the pass producing step ``t``.  Attention sets
    are taken over completion columns only; prompt columns are always allowed.
    Condition 3 exempts tokens decoded in the last two steps (``t_l <= 1``).
    """
    ds = np.asarray(decode_step, dtype=np.int64)
    L = ds.size
    T = len(masks)
    S = prompt_len + L
    for m in masks:
        if np.asarray(m).shape != (S, S):
            raise ScheduleError(f"mask shape {np.asarray(m).shape} does not match prompt_len + L = {S}")
    if L and (ds.min() < 0 or ds.max() >= T):
        raise ScheduleError("decode steps do not match the number of masks")
    rep = CausalityReport()
    attend = [np.asarray(m, dtype=bool)[prompt_len:, prompt_len:] for m in masks]
    for l in range(L):
        tl = ds[l]
        omega = set(np.flatnonzero(ds > tl).tolist())
        u_tl = set(np.flatnonzero(ds == tl).tolist())
        sets = {t: set(np.flatnonzero(attend[t][l]).tolist()) for t in range(tl + 1)}
        for t, a in sets.items():
            if not omega <= a:
                rep.reasonable = False
                rep.witnesses["reasonable"].append((l, t))
        after = [t for t in range(tl)]
        for i, ti in enumerate(after):
            for tj in after[i + 1:]:
                if sets[ti] != sets[tj]:
                    rep.consistent = False
                    rep.witnesses["1"].append((l, ti, tj))
        if not sets[tl] <= omega | {l}:
            rep.no_future_at_decode = False
            rep.witnesses["2"].append((l, int(tl)))
        if tl >= 2:
            for t in after:
                if not sets[t] <= omega | u_tl:
                    rep.no_future_after = False
                    rep.witnesses["3"].append((l, t))
    return rep
