"""Trajectory log-likelihood estimators and the StepMerge error analysis.

Three ways to score the tokens of a finished trajectory:

* ``full``: one pass per decoding step, each token scored from the context it
  was actually decoded in (``T`` passes);
* ``stepmerge``: the ``T`` steps are cut into ``N`` contiguous segments and every
  token of a segment is scored from the context at the segment boundary
  (``N`` passes; ``N = T`` reproduces ``full``, ``N = 1`` scores everything
  from the all-mask completion);
* ``oneshot``: clean tokens followed by mask copies in one ``L_P + 2L`` pass,
  exact for any-order causal decoding.

``token_logprobs`` is the differentiable batched core used by the trainer.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import diffmath as dm
from .decoding import DecodeSchedule, Trajectory, make_schedule, sample_batch, step_mask
from .model import FORWARDS, ModelParams, build_oneshot_mask, default_positions, forward

ESTIMATORS = ("full", "stepmerge", "oneshot")


class EstimatorError(ValueError):
    pass


def segment_bounds(T: int, N: int, uneven: bool = False) -> list[tuple[int, int]]:
    """Inclusive step ranges ``(lo, hi)`` of the N segments, segment 0 holding t=0.

    With ``uneven`` and ``N`` not dividing ``T`` the segments decoded first (high
    ``t``) receive ``ceil(T/N)`` steps.
    """
    if not 1 <= N <= T:
        raise EstimatorError(f"need 1 <= N <= T, got N={N}, T={T}")
    if T % N:
        if not uneven:
            raise EstimatorError(f"N={N} does not divide T={T}; pass uneven=True to allow it")
        q, r = divmod(T, N)
        lengths = [q] * (N - r) + [q + 1] * r
    else:
        lengths = [T // N] * N
    bounds, lo = [], 0
    for n in lengths:
        bounds.append((lo, lo + n - 1))
        lo += n
    return bounds


def _check_batch(trajs: Sequence[Trajectory]) -> tuple[int, int, int]:
    if not trajs:
        raise EstimatorError("empty trajectory batch")
    LP, L, T = trajs[0].prompt_len, trajs[0].L, trajs[0].T
    if any(t.prompt_len != LP or t.L != L or t.T != T for t in trajs):
        raise EstimatorError("batched trajectories need equal prompt length, L and T")
    return LP, L, T


def _segment_rows(params: ModelParams, trajs, bounds):
    LP, L, _ = _check_batch(trajs)
    S = LP + L
    n, N = len(trajs), len(bounds)
    mask_id = params.config.mask_id
    tokens = np.empty((n * N, S), dtype=np.int64)
    masks = np.empty((n * N, S, S), dtype=bool)
    weights = np.zeros((n * N, S))
    targets = np.zeros((n * N, S), dtype=np.int64)
    for i, tr in enumerate(trajs):
        for j, (lo, hi) in enumerate(bounds):
            r = i * N + j
            tokens[r] = tr.context(hi, mask_id)
            masks[r] = step_mask(tr.generator, tr.decode_step, hi, LP)
            weights[r, LP:] = (tr.decode_step >= lo) & (tr.decode_step <= hi)
            targets[r, LP:] = tr.tokens
    positions = np.broadcast_to(default_positions(S), (n * N, S))
    return tokens, positions, masks, weights, targets


def token_logprobs(
    params: ModelParams,
    trajs: Sequence[Trajectory],
    estimator: str = "full",
    N: int | None = None,
    uneven: bool = False,
) -> dm.Array:
    """Per-position log-probabilities, shape ``(len(trajs), L)``.

    Differentiable when called inside a :class:`~d2bench.diffmath.Tape`.
    """
    LP, L, T = _check_batch(trajs)
    n = len(trajs)
    if estimator == "oneshot":
        S = LP + 2 * L
        tokens = np.empty((n, S), dtype=np.int64)
        masks = np.empty((n, S, S), dtype=bool)
        targets = np.zeros((n, S), dtype=np.int64)
        positions = None
        for i, tr in enumerate(trajs):
            m, positions = build_oneshot_mask(tr.decode_step, LP)
            masks[i] = m
            tokens[i] = np.concatenate([tr.prompt, tr.tokens, np.full(L, params.config.mask_id)])
            targets[i, LP + L:] = tr.tokens
        positions = np.broadcast_to(positions, (n, S))
        logp = dm.log_softmax(forward(params, tokens, positions, masks))
        picked = dm.gather(logp, targets)
        return dm.index(picked, (slice(None), slice(LP + L, S)))
    if estimator == "full":
        bounds = segment_bounds(T, T)
    elif estimator == "stepmerge":
        if N is None:
            raise EstimatorError("stepmerge needs N")
        bounds = segment_bounds(T, N, uneven)
    else:
        raise EstimatorError(f"unknown estimator {estimator!r}")
    tokens, positions, masks, weights, targets = _segment_rows(params, trajs, bounds)
    logp = dm.log_softmax(forward(params, tokens, positions, masks))
    picked = dm.mul(dm.gather(logp, targets), weights)
    per_pos = dm.sum(dm.reshape(picked, (n, len(bounds), LP + L)), axis=1)
    return dm.index(per_pos, (slice(None), slice(LP, LP + L)))


def batch_loglik(params, trajs, estimator="full", N=None, uneven=False) -> np.ndarray:
    """Numpy convenience wrapper around :func:`token_logprobs` (no tape)."""
    return token_logprobs(params, trajs, estimator, N, uneven).values


@dataclass
class LikelihoodBreakdown:
    per_position: np.ndarray
    attribution: np.ndarray   # decode step, segment index, or -1 for one-shot
    mode: str
    forward_passes: int

    @property
    def total(self) -> float:
        return float(self.per_position.sum())

    @property
    def mean_per_token(self) -> float:
        return float(self.per_position.mean()) if self.per_position.size else 0.0


def _breakdown(params, traj, estimator, N=None, uneven=False) -> LikelihoodBreakdown:
    before = FORWARDS.count
    values = batch_loglik(params, [traj], estimator, N, uneven)[0]
    passes = FORWARDS.count - before
    if estimator == "full":
        attribution = traj.decode_step.copy()
    elif estimator == "stepmerge":
        bounds = segment_bounds(traj.T, N, uneven)
        attribution = np.array([
            next(j for j, (lo, hi) in enumerate(bounds) if lo <= t <= hi) for t in traj.decode_step
        ], dtype=np.int64)
    else:
        attribution = np.full(traj.L, -1, dtype=np.int64)
    return LikelihoodBreakdown(values, attribution, estimator, passes)


def traj_loglik_full(params: ModelParams, traj: Trajectory) -> LikelihoodBreakdown:
    return _breakdown(params, traj, "full")


def traj_loglik_stepmerge(params: ModelParams, traj: Trajectory, N: int, uneven: bool = False) -> LikelihoodBreakdown:
    return _breakdown(params, traj, "stepmerge", N, uneven)


def traj_loglik_oneshot(params: ModelParams, traj: Trajectory) -> LikelihoodBreakdown:
    return _breakdown(params, traj, "oneshot")


# ---------------------------------------------------------------------------
# D_N, eps_block and the approximation bound


@dataclass
class BoundReport:
    N: int
    T: int
    L: int
    D_N: float
    mode: str            # "monte_carlo" or "exact"
    n_samples: int
    eps_block: float
    bound: float
    holds: bool
    stderr: float = 0.0
    eps_mode: str = "exact"

    def to_dict(self) -> dict:
        return asdict(self)


def sample_trajectories(
    params: ModelParams,
    prompt_sampler: Callable[[np.random.Generator], np.ndarray],
    template: DecodeSchedule,
    n_samples: int,
    rng: np.random.Generator,
    generator: str = "bidirectional",
    temperature: float = 1.0,
    batch_size: int = 64,
) -> list[Trajectory]:
    """Draw trajectories with an independent rng stream per sample."""
    seeds = rng.integers(0, 2**63 - 1, size=n_samples)
    out: list[Trajectory] = []
    for start in range(0, n_samples, batch_size):
        rngs = [np.random.default_rng(int(s)) for s in seeds[start:start + batch_size]]
        prompts = [np.asarray(prompt_sampler(r)) for r in rngs]
        scheds = [make_schedule(template.L, template.T, template.k, template.policy, r) for r in rngs]
        out.extend(sample_batch(params, prompts, scheds, generator, temperature, rngs))
    return out


def dn_samples(params: ModelParams, trajs: Sequence[Trajectory], N: int, uneven: bool = False,
               batch_size: int = 64) -> np.ndarray:
    """Per-trajectory log-ratio ``log p_full - log p_stepmerge``."""
    out = []
    for start in range(0, len(trajs), batch_size):
        chunk = trajs[start:start + batch_size]
        full = batch_loglik(params, chunk, "full").sum(axis=1)
        sm = batch_loglik(params, chunk, "stepmerge", N, uneven).sum(axis=1)
        out.append(full - sm)
    return np.concatenate(out)


def estimate_DN(
    params: ModelParams,
    prompt_sampler: Callable[[np.random.Generator], np.ndarray] | None,
    template: DecodeSchedule | None,
    N: int,
    n_samples: int,
    rng: np.random.Generator | None = None,
    generator: str = "bidirectional",
    trajectories: Sequence[Trajectory] | None = None,
) -> BoundReport:
    """Monte Carlo D_N: mean log-ratio over trajectories drawn from the model.

    Pass ``trajectories`` to reuse one sample set across several N.  The
    returned report carries the estimate and its standard error; the
    eps_block/bound fields are left at zero (see :func:`stepmerge_bound`).
    """
    if trajectories is None:
        if n_samples < 1:
            raise EstimatorError("n_samples must be >= 1")
        trajectories = sample_trajectories(params, prompt_sampler, template, n_samples, rng, generator)
    d = dn_samples(params, trajectories, N)
    n = d.size
    se = float(d.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    T, L = trajectories[0].T, trajectories[0].L
    return BoundReport(N, T, L, float(d.mean()), "monte_carlo", n, 0.0, 0.0, False, se, "none")


def _position_logdists(params, trajs, bounds) -> np.ndarray:
    """Full output log-distribution of each position from its segment context, (n, L, V)."""
    LP, L, _ = _check_batch(trajs)
    tokens, positions, masks, weights, _ = _segment_rows(params, trajs, bounds)
    logp = dm.log_softmax(forward(params, tokens, positions, masks)).values
    n, N = len(trajs), len(bounds)
    logp = logp.reshape(n, N, LP + L, -1)[:, :, LP:]
    w = weights.reshape(n, N, LP + L)[:, :, LP:]
    return np.einsum("inl,inlv->ilv", w, logp)


def estimate_eps_block(
    params: ModelParams,
    trajectories: Sequence[Trajectory],
    N: int,
    mode: str = "sampled",
    uneven: bool = False,
) -> float:
    """Value-prediction sensitivity of the StepMerge blocks.

    Max over trajectories, decoded positions and token values of
    ``log p(v | x_{t_l+1}) - log p(v | block-boundary context)``.  In sampled
    mode this lower-bounds the true maximum; ``mode="exact"`` enumerates every
    reachable state (tiny instances only).
    """
    if mode == "exact":
        from .oracle import exact_DN_and_eps

        tr = trajectories[0]
        _, eps = exact_DN_and_eps(params, tr.L, tr.T, N, prompt=tr.prompt, generator=tr.generator)
        return eps
    if mode != "sampled":
        raise EstimatorError(f"unknown eps mode {mode!r}")
    T = trajectories[0].T
    full_b = segment_bounds(T, T)
    seg_b = segment_bounds(T, N, uneven)
    eps = 0.0
    for start in range(0, len(trajectories), 64):
        chunk = trajectories[start:start + 64]
        full = _position_logdists(params, chunk, full_b)
        seg = _position_logdists(params, chunk, seg_b)
        eps = max(eps, float((full - seg).max()))
    return max(eps, 0.0)


def stepmerge_bound(L: int, T: int, N: int, eps_block: float, D_N: float | None = None,
                   mode: str = "exact", n_samples: int = 0, stderr: float = 0.0,
                   eps_mode: str = "exact") -> BoundReport:
    """``L log(T/N + 1) + L eps_block`` and whether ``D_N`` sits under it."""
    if N < 1 or T < 1:
        raise EstimatorError("need N >= 1 and T >= 1")
    bound = L * math.log(T / N + 1.0) + L * eps_block
    d = 0.0 if D_N is None else float(D_N)
    return BoundReport(N, T, L, d, mode, n_samples, float(eps_block), bound, bool(d <= bound), stderr, eps_mode)


DN_SWEEP_COLUMNS = ("N", "D_N", "stderr", "eps_block", "bound", "holds")


def dn_sweep(params: ModelParams, trajectories: Sequence[Trajectory], Ns: Iterable[int]) -> list[BoundReport]:
    """D_N, sampled eps_block and the bound for each N on one shared sample set."""
    T, L = trajectories[0].T, trajectories[0].L
    rows = []
    for N in Ns:
        est = estimate_DN(params, None, None, N, len(trajectories), trajectories=trajectories)
        eps = estimate_eps_block(params, trajectories, N)
        rows.append(stepmerge_bound(L, T, N, eps, est.D_N, "monte_carlo", est.n_samples, est.stderr, "sampled"))
    return rows


def write_dn_csv(path, rows: Sequence[BoundReport]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(DN_SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r.N, repr(r.D_N), repr(r.stderr), repr(r.eps_block), repr(r.bound), str(r.holds).lower()])


def is_non_increasing(rows: Sequence[BoundReport], n_se: float = 2.0) -> bool:
    """True when each D_N exceeds its predecessor by at most ``n_se`` combined standard errors."""
    ordered = sorted(rows, key=lambda r: r.N)
    for a, b in zip(ordered, ordered[1:]):
        if b.D_N - a.D_N > n_se * math.hypot(a.stderr, b.stderr):
            return False
    return True
