"""Brute-force verifiers for tiny instances.

Everything here enumerates the sampler's full randomness (unmask order and
token values) as a tree: level ``t`` holds every reachable state ``x_{t+1}``
and one batched forward per level scores all of them.  The tree is built from
the model and mask constructors directly and does not go through the
likelihood estimators, so the two can be checked against each other.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import diffmath as dm
from .decoding import Trajectory, make_schedule, sample_batch, step_sizes
from .model import (
    ModelParams,
    build_bidirectional_mask,
    build_decoding_mask,
    default_positions,
    forward,
)


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class EnumerationBudget:
    max_trajectories: int = 10**6
    max_L: int = 4
    max_V: int = 4
    max_T: int = 4

    def check(self, L: int, V: int, T: int, count: int) -> None:
        if L > self.max_L or V > self.max_V or T > self.max_T:
            raise BudgetError(f"instance L={L}, V={V}, T={T} exceeds caps "
                              f"L<={self.max_L}, V<={self.max_V}, T<={self.max_T}")
        if count > self.max_trajectories:
            raise BudgetError(f"{count} trajectories exceed the budget of {self.max_trajectories}")


DEFAULT_BUDGET = EnumerationBudget()


def count_trajectories(L: int, V: int, sizes: Sequence[int], fixed_order: bool) -> int:
    orders = 1
    if not fixed_order:
        orders = math.factorial(L)
        for s in sizes:
            orders //= math.factorial(int(s))
    return orders * V**L


@dataclass
class Enumeration:
    """The decoding tree of a tiny instance.

    ``nodes[t]`` are the states fed to the pass producing step ``t`` as
    ``(tokens, decode_step)`` arrays with ``-1`` for undecided slots;
    ``logdists[t]`` their completion-slot log-distributions ``(n_t, L, V)``;
    ``ancestor[t]`` maps every leaf to its node at level ``t``.
    """

    prompt: np.ndarray
    L: int
    T: int
    V: int
    generator: str
    nodes: dict[int, tuple[np.ndarray, np.ndarray]]
    logdists: dict[int, np.ndarray]
    ancestor: dict[int, np.ndarray]
    tokens: np.ndarray          # (n, L) leaf completions
    decode_step: np.ndarray     # (n, L)
    order_logp: np.ndarray      # (n,) log-probability of the unmask order
    token_logp: np.ndarray      # (n, L) log-probability of each decoded token

    @property
    def logp(self) -> np.ndarray:
        return self.order_logp + self.token_logp.sum(axis=1)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.logp)

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def trajectories(self) -> list[Trajectory]:
        return [Trajectory(self.prompt, self.tokens[i], self.decode_step[i], self.token_logp[i], self.T, self.generator)
                for i in range(len(self))]


def _level_inputs(params: ModelParams, prompt, tokens, ds, t, generator):
    LP, L = prompt.size, tokens.shape[1]
    n = tokens.shape[0]
    inp = np.empty((n, LP + L), dtype=np.int64)
    inp[:, :LP] = prompt
    inp[:, LP:] = np.where(ds >= 0, tokens, params.config.mask_id)
    if generator == "bidirectional":
        masks = np.broadcast_to(build_bidirectional_mask(LP, L), (n, LP + L, LP + L))
    else:
        masks = np.stack([build_decoding_mask(d, t, LP) for d in ds])
    positions = np.broadcast_to(default_positions(LP + L), (n, LP + L))
    return inp, positions, masks


def enumerate_decoding(
    params: ModelParams,
    L: int,
    T: int,
    k: int | None = None,
    prompt: Sequence[int] = (),
    generator: str = "bidirectional",
    order: Sequence[int] | None = None,
    budget: EnumerationBudget = DEFAULT_BUDGET,
) -> Enumeration:
    """Enumerate every trajectory of the sampler at temperature 1.

    ``order`` fixes the decode step of each position (deterministic
    schedule); otherwise each step unmasks a uniformly random subset of the
    remaining positions, which contributes ``1 / C(M, |U_t|)`` per step.
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    V = params.config.n_output
    if order is not None:
        order = np.asarray(order, dtype=np.int64)
        sizes = np.bincount(order, minlength=T)
        if order.size != L or order.min(initial=0) < 0 or order.max(initial=0) >= T:
            raise BudgetError("order must give a step in [0, T) for each position")
    else:
        sizes = step_sizes(L, T, k)
    budget.check(L, V, T, count_trajectories(L, V, sizes, order is not None))

    tokens = np.full((1, L), -1, dtype=np.int64)
    ds = np.full((1, L), -1, dtype=np.int64)
    olp = np.zeros(1)
    tlp = np.zeros((1, L))
    parents: dict[int, np.ndarray] = {}
    nodes, logdists = {}, {}
    for t in range(T - 1, -1, -1):
        nodes[t] = (tokens, ds)
        inp, pos, masks = _level_inputs(params, prompt, tokens, ds, t, generator)
        ld = dm.log_softmax(forward(params, inp, pos, masks)).values[:, prompt.size:]
        logdists[t] = ld
        child_tok, child_ds, child_olp, child_tlp, par = [], [], [], [], []
        for i in range(tokens.shape[0]):
            masked = np.flatnonzero(ds[i] < 0)
            if order is not None:
                subsets = [np.flatnonzero(order == t)]
                sub_lp = 0.0
            else:
                subsets = [np.array(c, dtype=np.int64) for c in itertools.combinations(masked, int(sizes[t]))]
                sub_lp = -math.log(math.comb(masked.size, int(sizes[t])))
            for u in subsets:
                for vals in itertools.product(range(V), repeat=u.size):
                    tk, d, tl = tokens[i].copy(), ds[i].copy(), tlp[i].copy()
                    tk[u] = vals
                    d[u] = t
                    tl[u] = ld[i, u, list(vals)]
                    child_tok.append(tk)
                    child_ds.append(d)
                    child_olp.append(olp[i] + sub_lp)
                    child_tlp.append(tl)
                    par.append(i)
        tokens, ds = np.array(child_tok), np.array(child_ds)
        olp, tlp = np.array(child_olp), np.array(child_tlp)
        parents[t] = np.array(par, dtype=np.int64)

    # compose parent maps into leaf -> node-at-level-t maps
    ancestor: dict[int, np.ndarray] = {}
    idx = np.arange(tokens.shape[0])
    for t in range(T):
        idx = parents[t][idx]
        ancestor[t] = idx
    return Enumeration(prompt, L, T, V, generator, nodes, logdists, ancestor, tokens, ds, olp, tlp)


def enumerate_trajectories(params, L, T, k=None, prompt=(), generator="bidirectional", order=None,
                           budget=DEFAULT_BUDGET) -> list[tuple[Trajectory, float]]:
    """All trajectories with their exact probabilities."""
    e = enumerate_decoding(params, L, T, k, prompt, generator, order, budget)
    return list(zip(e.trajectories(), e.probs.tolist()))


# ---------------------------------------------------------------------------
# Policy gradients


def _differentiable_logp(params: ModelParams, e: Enumeration) -> dm.Array:
    """Leaf log-probabilities rebuilt on the tape, one batched pass per level."""
    LP = e.prompt.size
    S = LP + e.L
    V = e.V
    total = dm.Array(e.order_logp.copy())
    for t in range(e.T - 1, -1, -1):
        tokens, ds = e.nodes[t]
        inp, pos, masks = _level_inputs(params, e.prompt, tokens, ds, t, e.generator)
        flat = dm.reshape(dm.log_softmax(forward(params, inp, pos, masks)), (-1,))
        leaves, slots = np.nonzero(e.decode_step == t)
        order = np.lexsort((slots, leaves))
        leaves, slots = leaves[order], slots[order]
        width = leaves.size // len(e)
        node = e.ancestor[t][leaves]
        idx = ((node * S + LP + slots) * V + e.tokens[leaves, slots]).reshape(len(e), width)
        total = dm.add(total, dm.sum(dm.index(flat, idx), axis=1))
    return total


def _grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: (a.grad.copy() if a.grad is not None else np.zeros_like(a.values)) for k, a in params.arrays.items()}


def rewards_of(e: Enumeration, reward: Callable) -> np.ndarray:
    return np.array([float(reward(e.prompt, e.tokens[i])) for i in range(len(e))])


def exact_policy_gradient(params: ModelParams, reward: Callable, L: int, T: int, k=None, prompt=(),
                          generator="bidirectional", order=None) -> dict[str, np.ndarray]:
    """Gradient of ``sum_traj p_theta(traj) r(traj)`` by differentiating the sum itself."""
    e = enumerate_decoding(params, L, T, k, prompt, generator, order)
    r = rewards_of(e, reward)
    params.zero_grad()
    with dm.Tape() as tape:
        expected = dm.sum(dm.mul(dm.exp(_differentiable_logp(params, e)), r))
        tape.backward(expected)
    g = _grads(params)
    params.zero_grad()
    return g


def estimator_expected_gradient(params: ModelParams, reward: Callable, L: int, T: int, k=None, prompt=(),
                                generator="bidirectional", order=None, clip_eps: float = 0.2
                                ) -> dict[str, np.ndarray]:
    """Exact expectation, at theta = theta_old, of the gradient of the per-step
    importance-weighted surrogate used by the trainer (full estimator, raw reward
    as the advantage, no KL and no length normalisation)."""
    from .likelihood import token_logprobs
    from .rltrain import clipped_surrogate

    old = params.snapshot("old")
    e = enumerate_decoding(old, L, T, k, prompt, generator, order)
    p = e.probs
    r = rewards_of(e, reward)
    trajs = e.trajectories()
    params.zero_grad()
    with dm.Tape() as tape:
        logp = token_logprobs(params, trajs, "full")
        terms = clipped_surrogate(logp, e.token_logp, r, clip_eps)
        objective = dm.sum(dm.mul(dm.sum(terms, axis=1), p))
        tape.backward(objective)
    g = _grads(params)
    params.zero_grad()
    return g


def gradient_relative_errors(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> dict[str, float]:
    """Per parameter tensor: ``||a - b|| / max(||b||, 1e-300)`` (0 when both vanish)."""
    out = {}
    for name in b:
        diff = float(np.linalg.norm(a[name] - b[name]))
        ref = float(np.linalg.norm(b[name]))
        out[name] = 0.0 if diff == 0.0 else diff / max(ref, 1e-300)
    return out


def table_reward(V: int, L: int, rng: np.random.Generator) -> Callable:
    """A random reward in [0, 1] for each of the V**L completions."""
    table = rng.random(V**L)
    weights = V ** np.arange(L - 1, -1, -1)

    def reward(prompt, completion):
        return float(table[int(np.dot(np.asarray(completion), weights))])

    return reward


# ---------------------------------------------------------------------------
# StepMerge error


def exact_DN_and_eps(params: ModelParams, L: int, T: int, N: int, k=None, prompt=(),
                     generator="bidirectional", order=None, uneven: bool = False,
                     budget: EnumerationBudget = DEFAULT_BUDGET) -> tuple[float, float]:
    """Exact ``D_N`` and ``eps_block`` by enumerating every reachable state.

    ``D_N = sum_traj p(traj) [log p_full - log p_stepmerge]`` (order
    probabilities are shared and cancel).  ``eps_block`` maximises
    ``log p(v | x_{t+1}) - log p(v | boundary state)`` over every node at a
    step inside a segment, every still-masked position and every value.
    """
    from .likelihood import segment_bounds

    if L == 0:
        return 0.0, 0.0
    e = enumerate_decoding(params, L, T, k, prompt, generator, order, budget)
    bounds = segment_bounds(T, N, uneven)
    seg_of = {t: (lo, hi) for lo, hi in bounds for t in range(lo, hi + 1)}

    sm = np.zeros(len(e))
    rows = np.arange(len(e))
    for l in range(L):
        t_l = e.decode_step[:, l]
        for t in np.unique(t_l):
            sel = rows[t_l == t]
            hi = seg_of[int(t)][1]
            sm[sel] += e.logdists[hi][e.ancestor[hi][sel], l, e.tokens[sel, l]]
    full = e.token_logp.sum(axis=1)
    D = float(np.dot(e.probs, full - sm))

    eps = 0.0
    for lo, hi in bounds:
        for t in range(lo, hi):
            # node at level t -> its ancestor at level hi
            tokens, ds = e.nodes[t]
            anc = _node_ancestor(e, t, hi)
            still = ds < 0
            if order is not None:
                still &= (np.asarray(order) == t)[None, :]
            if not still.any():
                continue
            diff = e.logdists[t] - e.logdists[hi][anc]
            eps = max(eps, float(diff[still].max()))
    return D, max(eps, 0.0)


def _node_ancestor(e: Enumeration, t: int, hi: int) -> np.ndarray:
    """For every node at level t, the index of its ancestor node at level hi >= t."""
    # every leaf below a node shares the node's ancestors, so any one will do
    leaf_of = np.empty(e.nodes[t][0].shape[0], dtype=np.int64)
    leaf_of[e.ancestor[t]] = np.arange(len(e))
    return e.ancestor[hi][leaf_of]


# ---------------------------------------------------------------------------
# One-shot equivalence


@dataclass
class EquivalenceReport:
    trials: int
    any_order_max_gap: float
    bidirectional_max_gap: float
    tol: float = 1e-9

    @property
    def any_order_pass(self) -> bool:
        return bool(self.any_order_max_gap <= self.tol)

    @property
    def bidirectional_fails(self) -> bool:
        return bool(self.bidirectional_max_gap > self.tol)

    def to_dict(self) -> dict:
        return {"trials": self.trials, "any_order_max_gap": self.any_order_max_gap,
                "bidirectional_max_gap": self.bidirectional_max_gap, "tol": self.tol,
                "any_order_pass": bool(self.any_order_pass), "bidirectional_fails": bool(self.bidirectional_fails)}


def oneshot_equivalence_suite(params: ModelParams, trials: int, rng: np.random.Generator,
                              max_L: int = 8, prompt_len: int = 2, temperature: float = 1.0
                              ) -> EquivalenceReport:
    """Compare one-shot and per-step log-probabilities on random schedules.

    Each trial draws L in [1, max_L], k in [1, L] and a random schedule with
    ``ceil(L/k)`` steps, then
    samples one any-order and one bidirectional trajectory with it.
    """
    from .likelihood import batch_loglik

    cfg = params.config
    gaps = {"any_order": 0.0, "bidirectional": 0.0}
    for _ in range(trials):
        L = int(rng.integers(1, max_L + 1))
        k = int(rng.integers(1, L + 1))
        sched = make_schedule(L, -(-L // k), k, "random", rng)
        prompt = rng.integers(0, cfg.vocab_size - 1, prompt_len)
        for gen in gaps:
            traj = sample_batch(params, [prompt], [sched], gen, temperature, [rng])[0]
            gap = np.abs(batch_loglik(params, [traj], "oneshot") - batch_loglik(params, [traj], "full")).max()
            gaps[gen] = max(gaps[gen], float(gap))
    return EquivalenceReport(trials, gaps["any_order"], gaps["bidirectional"])


# ---------------------------------------------------------------------------
# The combined suite behind the ``verify`` subcommand


def _tiny_params(L: int, V: int, rng: np.random.Generator, std: float = 0.5) -> ModelParams:
    from .model import ModelConfig, init_params

    cfg = ModelConfig(vocab_size=V + 1, n_output=V, d_model=8, n_layers=2, n_heads=1, max_positions=8)
    return init_params(cfg, rng, std=std)


def verification_suite(seed: int = 0, draws: int = 3) -> dict:
    """Run the brute-force checks on small instances; every entry carries ``passed``."""
    from .decoding import check_any_order_causal, trajectory_masks
    from .likelihood import stepmerge_bound

    report: dict[str, dict] = {}

    worst_sum, worst_grad = 0.0, 0.0
    for L, T, V in ((2, 2, 2), (2, 2, 3), (3, 3, 2)):
        for d in range(draws):
            rng = np.random.default_rng([seed, L, T, V, d])
            params = _tiny_params(L, V, rng)
            reward = table_reward(V, L, rng)
            e = enumerate_decoding(params, L, T)
            worst_sum = max(worst_sum, abs(float(e.probs.sum()) - 1.0))
            errs = gradient_relative_errors(estimator_expected_gradient(params, reward, L, T),
                                            exact_policy_gradient(params, reward, L, T))
            worst_grad = max(worst_grad, max(errs.values()))
    report["enumeration_normalised"] = {"passed": bool(worst_sum < 1e-10), "max_error": float(worst_sum)}
    report["policy_gradient_exact"] = {"passed": bool(worst_grad < 1e-6), "max_relative_error": float(worst_grad)}

    violations, checked = [], 0
    for L, T, V in ((2, 2, 2), (3, 3, 2), (4, 4, 2)):
        for N in (n for n in range(1, T + 1) if T % n == 0):
            for d in range(draws):
                rng = np.random.default_rng([seed, 99, L, T, V, N, d])
                params = _tiny_params(L, V, rng, std=1.0)
                D, eps = exact_DN_and_eps(params, L, T, N)
                rep = stepmerge_bound(L, T, N, eps, D)
                checked += 1
                if not rep.holds:
                    violations.append(rep.to_dict())
    report["stepmerge_bound"] = {"passed": bool(not violations), "instances": checked, "violations": violations}

    rng = np.random.default_rng([seed, 3])
    from .model import ModelConfig, init_params

    cfg = ModelConfig(vocab_size=8, n_output=6, d_model=16, n_heads=2, max_positions=24)
    params = init_params(cfg, rng, std=0.3)
    eq = oneshot_equivalence_suite(params, 20, rng)
    report["oneshot_equivalence"] = {"passed": bool(eq.any_order_pass and eq.bidirectional_max_gap > 1e-3), **eq.to_dict()}

    causal_ok, bidir_flagged = True, True
    for _ in range(20):
        L = int(rng.integers(2, 8))
        k = int(rng.integers(1, L))
        T = -(-L // k)
        sched = make_schedule(L, T, k, "random", rng)
        for gen in ("any_order", "bidirectional"):
            traj = Trajectory(np.zeros(2, dtype=np.int64), np.zeros(L, dtype=np.int64), sched.decode_step(),
                              np.zeros(L), T, gen)
            ok = check_any_order_causal(trajectory_masks(traj), traj.decode_step, 2).passed
            if gen == "any_order":
                causal_ok &= ok
            else:
                bidir_flagged &= not ok
    report["causality_checker"] = {"passed": bool(causal_ok and bidir_flagged),
                                   "any_order_pass": bool(causal_ok), "bidirectional_rejected": bool(bidir_flagged)}

    cfg = ModelConfig(vocab_size=5, n_output=4, d_model=8, n_heads=2, max_positions=8)
    params = init_params(cfg, rng, std=0.5)
    traj = sample_batch(params, [np.array([4])], [make_schedule(3, 3, 1, "random", rng)], "any_order", 1.0, [rng])[0]
    from .likelihood import token_logprobs

    err = dm.grad_check(lambda: dm.sum(token_logprobs(params, [traj], "oneshot")), params.parameters(),
                        h=1e-5, max_entries=8, rng=rng)
    report["gradient_check"] = {"passed": bool(err < 1e-4), "max_relative_error": float(err)}

    report["all_passed"] = bool(all(v["passed"] for v in report.values() if isinstance(v, dict)))
    return report
