"""Verifiable-reward toy tasks: a prompt sampler plus a deterministic reward.

Every task fixes the completion length (no end-of-sequence token) and maps
onto the model's vocabulary layout: emittable tokens first, prompt-only
symbols next, the mask token last.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import ModelConfig


@dataclass(frozen=True)
class Task:
    name: str
    n_output: int            # emittable tokens, ids 0..n_output-1
    n_prompt_only: int       # extra prompt symbols after the emittable ids
    prompt_len: int
    length: int
    reward_fn: Callable[[np.ndarray, np.ndarray], float] = field(repr=False)
    prompt_fn: Callable[[np.random.Generator], np.ndarray] = field(repr=False)
    data_fn: Callable[[np.random.Generator], tuple[np.ndarray, np.ndarray]] | None = field(default=None, repr=False)
    description: str = ""

    @property
    def vocab_size(self) -> int:
        return self.n_output + self.n_prompt_only + 1

    def sample_prompt(self, rng: np.random.Generator) -> np.ndarray:
        return np.asarray(self.prompt_fn(rng), dtype=np.int64)

    def reward(self, prompt, completion) -> float:
        return float(self.reward_fn(np.asarray(prompt), np.asarray(completion)))

    def sample_data(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """A (prompt, completion) demonstration for denoising pre-training."""
        if self.data_fn is None:
            raise NotImplementedError(f"task {self.name!r} has no demonstration data")
        return self.data_fn(rng)

    def model_config(self, **overrides) -> ModelConfig:
        kw = dict(vocab_size=self.vocab_size, n_output=self.n_output,
                  max_positions=max(32, self.prompt_len + self.length))
        kw.update(overrides)
        return ModelConfig(**kw)


# ---------------------------------------------------------------------------
# rewards


def reward_sorted(prompt, completion) -> float:
    """Fraction of adjacent completion pairs in non-decreasing order."""
    c = np.asarray(completion)
    if c.size < 2:
        return 1.0
    return float(np.mean(c[1:] >= c[:-1]))


def reward_copy(prompt, completion) -> float:
    """Per-position match rate against the prompt pattern repeated to full length."""
    p, c = np.asarray(prompt), np.asarray(completion)
    if c.size == 0:
        return 1.0
    if p.size == 0:
        return 0.0
    target = np.resize(p, c.size)
    return float(np.mean(c == target))


DIGITS = 10
PLUS, MINUS, TIMES = 10, 11, 12
_OPS = {PLUS: lambda a, b: a + b, MINUS: lambda a, b: a - b, TIMES: lambda a, b: a * b}


def eval_postfix(tokens) -> int | None:
    """Integer value of a postfix expression over digit/operator ids, None if malformed."""
    stack: list[int] = []
    for tok in tokens:
        tok = int(tok)
        if 0 <= tok < DIGITS:
            stack.append(tok)
        elif tok in _OPS:
            if len(stack) < 2:
                return None
            b, a = stack.pop(), stack.pop()
            stack.append(_OPS[tok](a, b))
        else:
            return None
    return stack[0] if len(stack) == 1 else None


def countdown_target(prompt) -> int:
    p = np.asarray(prompt)
    return int(p[3]) * 100 + int(p[4]) * 10 + int(p[5])


def reward_mini_countdown(prompt, completion) -> float:
    """1 if the postfix completion over the three prompt digits hits the target,
    0.2 if it is a well-formed expression using exactly those digits, else 0."""
    p, c = np.asarray(prompt), np.asarray(completion)
    operands = sorted(int(t) for t in c if 0 <= int(t) < DIGITS)
    if operands != sorted(int(d) for d in p[:3]):
        return 0.0
    value = eval_postfix(c)
    if value is None:
        return 0.0
    return 1.0 if value == countdown_target(p) else 0.2


def reward_marker(prompt, completion, flagged: int = 0) -> float:
    """Frequency of the flagged token in the completion."""
    c = np.asarray(completion)
    if c.size == 0:
        return 0.0
    return float(np.mean(c == flagged))


# ---------------------------------------------------------------------------
# task constructors


def random_walk(length: int, rng: np.random.Generator) -> np.ndarray:
    """Digits moving one step up or down at a time, reflected at 0 and 9."""
    x = np.empty(length, dtype=np.int64)
    x[0] = rng.integers(0, DIGITS)
    for i in range(1, length):
        step = 1 if rng.random() < 0.5 else -1
        nxt = x[i - 1] + step
        x[i] = nxt if 0 <= nxt < DIGITS else x[i - 1] - step
    return x


def sorted_task(length: int = 8, demos: str = "walk") -> Task:
    """Sortedness reward.  Demonstrations (used only for pre-training a
    reference model) are random walks by default, a language with strong
    neighbour dependence but only chance-level sortedness; ``demos="sorted"``
    gives sorted uniform digits instead."""
    bos = DIGITS  # single prompt-only symbol
    if demos not in ("walk", "sorted"):
        raise ValueError(f"demos must be 'walk' or 'sorted', got {demos!r}")

    def data(rng):
        if demos == "sorted":
            return np.array([bos]), np.sort(rng.integers(0, DIGITS, length))
        return np.array([bos]), random_walk(length, rng)

    return Task("sorted", DIGITS, 1, 1, length, reward_sorted,
                lambda rng: np.array([bos]), data,
                "emit digits in non-decreasing order")


def copy_task(length: int = 6, prompt_len: int = 3, alphabet: int = 6, shift_prob: float = 0.5) -> Task:
    def prompt(rng):
        return rng.integers(0, alphabet, prompt_len)

    def data(rng):
        p = prompt(rng)
        offset = rng.integers(0, prompt_len) if rng.random() < shift_prob else 0
        return p, np.resize(np.roll(p, -offset), length)

    return Task("copy", alphabet, 0, prompt_len, length, reward_copy, prompt, data,
                "repeat the prompt pattern; demonstrations are sometimes phase shifted")


def _countdown_prompt(rng) -> np.ndarray:
    while True:
        digits = rng.integers(1, DIGITS, 3)
        ops = rng.choice([PLUS, MINUS, TIMES], 2)
        expr = [digits[0], digits[1], ops[0], digits[2], ops[1]] if rng.random() < 0.5 else \
            [digits[0], digits[1], digits[2], ops[0], ops[1]]
        value = eval_postfix(expr)
        if value is not None and 0 <= value <= 999:
            return np.array([*digits, value // 100, (value // 10) % 10, value % 10])


def mini_countdown_task() -> Task:
    return Task("mini_countdown", 13, 0, 6, 5, reward_mini_countdown, _countdown_prompt, None,
                "postfix arithmetic over three digits reaching a three-digit target")


def marker_task(length: int = 12, alphabet: int = 8, flagged: int = 0) -> Task:
    def reward(prompt, completion):
        return reward_marker(prompt, completion, flagged)

    def data(rng):
        return np.zeros(0, dtype=np.int64), rng.integers(0, alphabet, length)

    return Task("marker", alphabet, 0, 0, length, reward,
                lambda rng: np.zeros(0, dtype=np.int64), data,
                "unprompted generation rewarded by how often a flagged token appears")


TASKS = {
    "sorted": sorted_task,
    "copy": copy_task,
    "mini_countdown": mini_countdown_task,
    "marker": marker_task,
}


def get_task(name: str, **kwargs) -> Task:
    try:
        factory = TASKS[name]
    except KeyError:
        raise KeyError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None
    return factory(**kwargs)
