"""Acceptance criteria 1-8, each at its stated tolerance.

Every test prints a single ``CRITERION n PASS|FAIL ...`` line (also repeated
in the pytest terminal summary) before asserting.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from d2bench import cli
from d2bench import decoding as D
from d2bench import diffmath as dm
from d2bench import likelihood as LK
from d2bench import model as M
from d2bench import oracle as O
from d2bench import pretrain as P
from d2bench import rltrain as R
from d2bench import tasks

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.toml"


def verdict(n: int, ok: bool, detail: str, started: float, limit_s: float) -> None:
    elapsed = time.time() - started
    line = f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {detail} [{elapsed:.1f}s, limit {limit_s:.0f}s]"
    print(line)
    ACCEPTANCE_LINES.append(line)


# --- 1: exact expected estimator gradient -----------------------------------


def test_criterion_1_policy_gradient_exact():
    start = time.time()
    worst = 0.0
    for L, T, V in ((2, 2, 2), (2, 2, 3), (3, 3, 2)):
        for d in range(20):
            rng = np.random.default_rng([1, L, T, V, d])
            params = O._tiny_params(L, V, rng)
            reward = O.table_reward(V, L, rng)
            errs = O.gradient_relative_errors(O.estimator_expected_gradient(params, reward, L, T),
                                              O.exact_policy_gradient(params, reward, L, T))
            worst = max(worst, max(errs.values()))
    ok = worst < 1e-6 and time.time() - start < 120
    verdict(1, ok, f"max per-parameter relative error {worst:.2e} (< 1e-6) over 60 draws", start, 120)
    assert ok


# --- 2: one-shot vs per-step equivalence ------------------------------------


def test_criterion_2_oneshot_equivalence():
    start = time.time()
    cfg = M.ModelConfig(vocab_size=8, n_output=6, d_model=16, n_heads=2, max_positions=24)
    params = M.init_params(cfg, np.random.default_rng(2), std=0.5)
    rep = O.oneshot_equivalence_suite(params, 100, np.random.default_rng(3), max_L=8)
    ok = rep.any_order_max_gap <= 1e-9 and rep.bidirectional_max_gap > 1e-3 and time.time() - start < 60
    verdict(2, ok, f"any-order max gap {rep.any_order_max_gap:.1e} (<= 1e-9), "
                   f"bidirectional max gap {rep.bidirectional_max_gap:.3f} (> 1e-3)", start, 60)
    assert ok


# --- shared pre-trained copy models (criteria 3 and 4) ----------------------

COPY = dict(length=8, prompt_len=3)
COPY_T, COPY_K = 8, 1
LL_TARGET = -0.25


@pytest.fixture(scope="module")
def copy_models():
    task = tasks.copy_task(**COPY)
    out = {"task": task, "started": time.time()}
    for gen in ("bidirectional", "any_order"):
        held = P.demo_trajectories(task, 128, COPY_T, COPY_K, np.random.default_rng(99), gen)
        params = M.init_params(task.model_config(d_model=32), np.random.default_rng(1))
        params, log = P.pretrain(params, task, gen, 3000, np.random.default_rng(0), lr=3e-3, T=COPY_T,
                                 k=COPY_K, heldout=held, eval_every=25, target=LL_TARGET)
        out[gen] = (params, held, log)
    return out


def test_criterion_3_oneshot_gap_by_training_discipline(copy_models):
    start = copy_models["started"]
    gaps, lls = {}, {}
    for gen in ("bidirectional", "any_order"):
        params, held, log = copy_models[gen]
        full = LK.batch_loglik(params, held, "full").mean()
        one = LK.batch_loglik(params, held, "oneshot").mean()
        gaps[gen], lls[gen] = abs(one - full), full
    matched = all(v >= LL_TARGET for v in lls.values()) and abs(lls["bidirectional"] - lls["any_order"]) < 0.05
    ok = matched and gaps["bidirectional"] > 0 and gaps["bidirectional"] >= 5 * gaps["any_order"] \
        and time.time() - start < 900
    ratio = gaps["bidirectional"] / gaps["any_order"] if gaps["any_order"] > 0 else float("inf")
    verdict(3, ok, f"held-out full LL/token bidirectional {lls['bidirectional']:.3f}, any-order "
                   f"{lls['any_order']:.3f}; one-shot gap {gaps['bidirectional']:.3f} vs "
                   f"{gaps['any_order']:.1e} (ratio {ratio:.3g} >= 5)", start, 900)
    assert ok


# --- 4: StepMerge exactness at N=T and the D_N trend ------------------------


def test_criterion_4_stepmerge_trend(copy_models):
    start = time.time()
    task = copy_models["task"]
    params = copy_models["bidirectional"][0]
    template = D.make_schedule(task.length, COPY_T, COPY_K, "random", np.random.default_rng(0))
    trajs = LK.sample_trajectories(params, task.sample_prompt, template, 256, np.random.default_rng(4),
                                   "bidirectional")
    exact = float(np.max(np.abs(LK.dn_samples(params, trajs, COPY_T))))
    rows = LK.dn_sweep(params, trajs, [1, 2, 4, 8])
    trend = LK.is_non_increasing(rows)
    ok = exact <= 1e-12 and trend and time.time() - start < 600
    table = ", ".join(f"D_{r.N}={r.D_N:.3f}+-{r.stderr:.3f}" for r in rows)
    verdict(4, ok, f"max |D_T| per trajectory {exact:.1e} (<= 1e-12); {table}; "
                   f"non-increasing within 2 s.e.: {trend}", start, 600)
    assert ok


# --- 5: the StepMerge error bound on the exact grid -------------------------


def _grid():
    for L in range(1, 5):
        for T in range(1, 5):
            try:
                D.step_sizes(L, T)
            except D.ScheduleError:
                continue
            for V in range(2, 5):
                for N in (n for n in range(1, T + 1) if T % n == 0):
                    yield L, T, V, N


def test_criterion_5_bound_holds_everywhere():
    start = time.time()
    checked, violations, tightest = 0, [], -np.inf
    for L, T, V, N in _grid():
        for d in range(20):
            params = O._tiny_params(L, V, np.random.default_rng([5, L, T, V, N, d]), std=1.0)
            for gen in D.GENERATORS:
                D_N, eps = O.exact_DN_and_eps(params, L, T, N, generator=gen)
                rep = LK.stepmerge_bound(L, T, N, eps, D_N)
                checked += 1
                tightest = max(tightest, D_N - rep.bound)
                if not rep.holds:
                    violations.append((L, T, V, N, d, gen))
    ok = not violations and time.time() - start < 300
    verdict(5, ok, f"{checked} exact instances, {len(violations)} violations, "
                   f"max D_N - bound {tightest:.3f}", start, 300)
    assert ok


# --- 6: gradient integrity ---------------------------------------------------

OPS = {
    "tanh": dm.tanh, "gelu": dm.gelu, "exp": dm.exp, "softmax": dm.softmax, "log_softmax": dm.log_softmax,
    "scale": lambda a: dm.scale(a, 2.5), "mean": dm.mean, "sum": lambda a: dm.sum(a, axis=1),
    "transpose": lambda a: dm.transpose(a, (1, 0)), "reshape": lambda a: dm.reshape(a, (-1,)),
    "clip": lambda a: dm.clip(a, -0.7, 0.7), "square": lambda a: dm.mul(a, a),
    "matmul": lambda a: dm.matmul(a, dm.transpose(a, (1, 0))),
    "sub_min": lambda a: dm.minimum(dm.sub(a, dm.scale(a, 0.2)), dm.scale(a, 0.5)),
}


def test_criterion_6_gradient_integrity():
    start = time.time()
    rng = np.random.default_rng(6)
    op_err = 0.0
    for name, op in OPS.items():
        x = dm.Array(rng.normal(size=(3, 4)), requires_grad=True)
        if name == "clip":
            x.values[np.abs(np.abs(x.values) - 0.7) < 1e-3] += 0.01
        w = rng.normal(size=op(x.values).shape)
        op_err = max(op_err, dm.grad_check(lambda: dm.sum(dm.mul(op(x), w)), [x], h=1e-6))
    g = dm.Array(1 + 0.1 * rng.normal(size=4), requires_grad=True)
    b = dm.Array(rng.normal(size=4), requires_grad=True)
    h = dm.Array(rng.normal(size=(2, 3, 4)), requires_grad=True)
    op_err = max(op_err, dm.grad_check(lambda: dm.sum(dm.tanh(dm.layer_norm(h, g, b))), [h, g, b], h=1e-6))

    task = tasks.sorted_task(4)
    params = M.init_params(task.model_config(d_model=16), np.random.default_rng(7), std=0.3)
    sched = [D.make_schedule(4, 2, 2, "random", np.random.default_rng(i)) for i in range(4)]
    trajs = D.sample_batch(params, [np.array([10])] * 4, sched, "any_order", 1.0,
                           [np.random.default_rng(i) for i in range(4)])
    adv, _ = R.compute_advantages([0.1, 0.5, 0.7, 1.0])
    model_err = 0.0
    for est in ("full", "stepmerge", "anyorder"):
        cfg = R.TrainerConfig(G=4, T=2, k=2, N=1, estimator=est, beta=0.05, clip_eps=0.5)
        e, n = cfg.likelihood_args()
        old = LK.token_logprobs(params, trajs, e, n).values
        batch = R.GroupBatch(np.array([10]), trajs, np.zeros(4), adv, old_logp=old, ref_logp=old + 0.1)
        p = params.copy()
        for a in p.arrays.values():
            a.values += 0.01 * np.random.default_rng(8).normal(size=a.values.shape)
        model_err = max(model_err, dm.grad_check(lambda: R.grpo_loss(p, [batch], cfg)[0], p.parameters(),
                                                 h=1e-6, max_entries=8, rng=np.random.default_rng(9)))
    ok = model_err < 1e-4 and op_err < 1e-5 and time.time() - start < 60
    verdict(6, ok, f"full-model loss relative error {model_err:.1e} (< 1e-4), "
                   f"per-op max {op_err:.1e} (< 1e-5)", start, 60)
    assert ok


# --- 7: RL on the sorted task -----------------------------------------------

RL_BUDGET = 4e10
RL_SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def rl_runs():
    started = time.time()
    task = tasks.sorted_task(8)
    rng = np.random.default_rng(0)
    ref = M.init_params(task.model_config(), rng)
    held = P.demo_trajectories(task, 128, 4, 2, np.random.default_rng(1), "bidirectional")
    ref, _ = P.pretrain(ref, task, "bidirectional", 1500, rng, batch=32, lr=3e-3, T=4, k=2, heldout=held,
                        eval_every=250)
    runs = {}
    for N in (2, 1):
        for seed in RL_SEEDS:
            cfg = R.TrainerConfig(task="sorted", N=N, T=4, k=2, estimator="stepmerge", lr=1e-3, seed=seed,
                                  flop_budget=RL_BUDGET, eval_interval=RL_BUDGET / 8, eval_prompts=128)
            runs[N, seed] = R.train(cfg, task, ref).records
    return runs, started


def test_criterion_7_rl_efficacy(rl_runs):
    runs, start = rl_runs
    assert tasks.sorted_task(8).vocab_size == 12
    base = float(np.median([runs[2, s][0]["mean_reward"] for s in RL_SEEDS]))
    final = {N: float(np.median([R.reward_at_budget(runs[N, s], RL_BUDGET) for s in RL_SEEDS])) for N in (2, 1)}
    gain = final[2] / base - 1.0
    # matched FLOPs: compare the median curves at every evaluation budget both runs reached
    grid = np.arange(1, 9) * RL_BUDGET / 8
    curve = {N: [float(np.median([R.reward_at_budget(runs[N, s], b) for s in RL_SEEDS])) for b in grid]
             for N in (2, 1)}
    wins = sum(a > b for a, b in zip(curve[2], curve[1]))
    efficacy = gain >= 0.5
    ordering = final[2] > final[1]
    ok = efficacy and ordering and time.time() - start < 1800
    verdict(7, ok, f"baseline {base:.3f}; N=2 median at {RL_BUDGET:.0e} FLOPs {final[2]:.3f} "
                   f"(+{100 * gain:.0f}%, needs >= +50%: {efficacy}); N=1 {final[1]:.3f}; "
                   f"N=2 ahead at budget: {ordering} (ahead at {wins}/8 checkpoints)", start, 1800)
    assert efficacy, "N=2 did not raise reward by 50%"
    assert ordering, f"N=1 outperformed N=2 at matched FLOPs: {curve}"


# --- 8: reproducibility -----------------------------------------------------


def test_criterion_8_reproducibility(tmp_path):
    start = time.time()
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [cli.main(["train", "--config", str(SMOKE), "--out", str(o), "--seed", "11"]) for o in outs]
    names = sorted(p.name for p in outs[0].iterdir() if p.suffix in (".jsonl", ".d2ck"))
    same = all((outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names)
    records = len((outs[0] / "metrics.jsonl").read_text().splitlines())
    ok = codes == [0, 0] and same and any(n.endswith(".d2ck") for n in names) and records >= 2
    verdict(8, ok, f"{len(names)} files (metrics.jsonl + checkpoints) byte-identical across two runs: {same}",
            start, 60)
    assert ok
    assert json.loads((outs[0] / "config.json").read_text())["seed"] == 11
