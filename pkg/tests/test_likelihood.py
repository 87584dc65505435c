import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2bench import decoding as D
from d2bench import diffmath as dm
from d2bench import likelihood as LK
from d2bench import model as M
from d2bench import oracle as O


@pytest.fixture(scope="module")
def params():
    cfg = M.ModelConfig(vocab_size=8, n_output=6, d_model=16, n_heads=2, max_positions=24)
    return M.init_params(cfg, np.random.default_rng(0), std=0.4)


def sample(params, generator, L=6, T=3, k=2, seed=0, n=1, prompt=(6, 7)):
    rng = np.random.default_rng(seed)
    scheds = [D.make_schedule(L, T, k, "random", rng) for _ in range(n)]
    return D.sample_batch(params, [np.array(prompt)] * n, scheds, generator, 1.0, [rng] * n)


def test_segment_bounds():
    assert LK.segment_bounds(4, 2) == [(0, 1), (2, 3)]
    assert LK.segment_bounds(4, 4) == [(0, 0), (1, 1), (2, 2), (3, 3)]
    with pytest.raises(LK.EstimatorError):
        LK.segment_bounds(5, 2)
    # uneven: the segments decoded first take the extra steps
    assert LK.segment_bounds(5, 2, uneven=True) == [(0, 1), (2, 4)]


@pytest.mark.parametrize("generator", D.GENERATORS)
def test_pass_counts(params, generator):
    traj = sample(params, generator, L=8, T=4)[0]
    assert LK.traj_loglik_full(params, traj).forward_passes == 4
    assert LK.traj_loglik_stepmerge(params, traj, 2).forward_passes == 2
    assert LK.traj_loglik_stepmerge(params, traj, 1).forward_passes == 1
    assert LK.traj_loglik_oneshot(params, traj).forward_passes == 1


@pytest.mark.parametrize("generator", D.GENERATORS)
def test_stepmerge_with_n_equal_t_is_full(params, generator):
    for traj in sample(params, generator, L=8, T=4, n=5):
        full = LK.traj_loglik_full(params, traj)
        sm = LK.traj_loglik_stepmerge(params, traj, 4)
        assert np.max(np.abs(full.per_position - sm.per_position)) <= 1e-12
        assert full.total == pytest.approx(full.per_position.sum(), abs=0)


def test_attribution_segments(params):
    traj = sample(params, "bidirectional", L=8, T=4)[0]
    b = LK.traj_loglik_stepmerge(params, traj, 2)
    B = 2
    for l, n in enumerate(b.attribution):
        assert n * B <= traj.decode_step[l] < (n + 1) * B


def test_t_equals_one_is_all_mask_context(params):
    traj = sample(params, "bidirectional", L=4, T=1, k=4)[0]
    cfg = params.config
    tokens = np.concatenate([traj.prompt, np.full(4, cfg.mask_id)])
    logp = dm.log_softmax(M.forward(params, tokens, np.arange(6), M.build_bidirectional_mask(2, 4))).values
    direct = logp[2 + np.arange(4), traj.tokens]
    for est in ("full", "stepmerge"):
        assert np.allclose(LK.batch_loglik(params, [traj], est, 1)[0], direct, atol=1e-12)


@pytest.mark.parametrize("generator", D.GENERATORS)
def test_n_one_scores_everything_from_all_masks(params, generator):
    traj = sample(params, generator, L=6, T=3)[0]
    cfg = params.config
    tokens = np.concatenate([traj.prompt, np.full(6, cfg.mask_id)])
    mask = D.step_mask(generator, traj.decode_step, traj.T - 1, 2)
    logp = dm.log_softmax(M.forward(params, tokens, np.arange(8), mask)).values
    assert np.allclose(LK.batch_loglik(params, [traj], "stepmerge", 1)[0], logp[2 + np.arange(6), traj.tokens],
                       atol=1e-12)


def test_stepmerge_two_pass_hand_rolled(params):
    traj = sample(params, "bidirectional", L=8, T=4, seed=3)[0]
    cfg = params.config
    expected = np.zeros(8)
    for lo, hi in [(0, 1), (2, 3)]:
        ctx = np.concatenate([traj.prompt, np.where(traj.decode_step > hi, traj.tokens, cfg.mask_id)])
        logp = dm.log_softmax(M.forward(params, ctx, np.arange(10), M.build_bidirectional_mask(2, 8))).values
        for l in range(8):
            if lo <= traj.decode_step[l] <= hi:
                expected[l] = logp[2 + l, traj.tokens[l]]
    assert np.allclose(LK.batch_loglik(params, [traj], "stepmerge", 2)[0], expected, atol=1e-12)


def test_full_matches_enumeration_conditionals():
    cfg = M.ModelConfig(vocab_size=4, n_output=3, d_model=8, n_heads=1, max_positions=4)
    params = M.init_params(cfg, np.random.default_rng(4), std=0.8)
    e = O.enumerate_decoding(params, 2, 2, generator="bidirectional")
    trajs = e.trajectories()
    assert np.allclose(LK.batch_loglik(params, trajs, "full"), e.token_logp, atol=1e-12)


def test_oneshot_equals_full_for_any_order(params):
    trajs = sample(params, "any_order", L=8, T=4, n=10)
    assert np.max(np.abs(LK.batch_loglik(params, trajs, "oneshot") - LK.batch_loglik(params, trajs, "full"))) < 1e-9


def test_oneshot_differs_for_bidirectional(params):
    trajs = sample(params, "bidirectional", L=8, T=4, n=10)
    assert np.max(np.abs(LK.batch_loglik(params, trajs, "oneshot") - LK.batch_loglik(params, trajs, "full"))) > 1e-3


@pytest.mark.parametrize("generator", D.GENERATORS)
def test_length_one_oneshot_is_single_conditional(params, generator):
    traj = sample(params, generator, L=1, T=1, k=1)[0]
    assert abs(LK.batch_loglik(params, [traj], "oneshot")[0, 0] - traj.logprobs[0]) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(0, 3), st.integers(0, 10**6))
def test_oneshot_iff_causal(L, LP, seed):
    rng = np.random.default_rng(seed)
    cfg = M.ModelConfig(vocab_size=8, n_output=6, d_model=16, n_heads=2, max_positions=24)
    params = M.init_params(cfg, rng, std=0.5)
    k = int(rng.integers(1, L + 1))
    T = -(-L // k)
    sched = D.make_schedule(L, T, k, "random", rng)
    prompt = rng.integers(0, 7, LP)
    for gen in D.GENERATORS:
        traj = D.sample_batch(params, [prompt], [sched], gen, 1.0, [rng])[0]
        causal = D.check_any_order_causal(D.trajectory_masks(traj), traj.decode_step, LP).passed
        gap = np.max(np.abs(LK.batch_loglik(params, [traj], "oneshot") - LK.batch_loglik(params, [traj], "full")))
        if causal:
            assert gap < 1e-9
        elif T >= 2 and L >= 2:
            assert gap > 1e-9


def test_token_logprobs_differentiable(params):
    trajs = sample(params, "any_order", L=4, T=2, n=2)
    p = params.copy()
    for est, N in (("full", None), ("stepmerge", 1), ("oneshot", None)):
        err = dm.grad_check(lambda: dm.sum(LK.token_logprobs(p, trajs, est, N)), p.parameters(), h=1e-5,
                            max_entries=4, rng=np.random.default_rng(0))
        assert err < 1e-4, est


def test_dn_zero_at_n_equal_t(params):
    trajs = sample(params, "bidirectional", L=8, T=4, n=16)
    d = LK.dn_samples(params, trajs, 4)
    assert np.max(np.abs(d)) <= 1e-12
    rep = LK.estimate_DN(params, None, None, 4, 16, trajectories=trajs)
    assert rep.D_N == 0.0 and rep.stderr == 0.0


def test_estimate_dn_samples_itself(params):
    template = D.make_schedule(6, 3, 2, rng=np.random.default_rng(0))
    rep = LK.estimate_DN(params, lambda r: np.array([6, 7]), template, 1, 32, np.random.default_rng(0))
    assert rep.n_samples == 32 and rep.stderr > 0 and rep.mode == "monte_carlo"
    with pytest.raises(LK.EstimatorError):
        LK.estimate_DN(params, lambda r: np.array([6, 7]), template, 1, 0, np.random.default_rng(0))


def test_eps_block_zero_cases(params):
    trajs = sample(params, "bidirectional", L=6, T=3, n=8)
    assert LK.estimate_eps_block(params, trajs, 3) == 0.0
    flat = params.copy()
    for name, a in flat.arrays.items():
        if name != "head.b":
            a.values[:] = 0.0 if not name.endswith(".g") else 1.0
    assert LK.estimate_eps_block(flat, trajs, 1) == 0.0
    assert LK.estimate_eps_block(params, trajs, 1) > 0.0


def test_eps_block_exact_mode_uses_enumeration():
    cfg = M.ModelConfig(vocab_size=4, n_output=3, d_model=8, n_heads=1, max_positions=4)
    params = M.init_params(cfg, np.random.default_rng(0), std=1.0)
    trajs = O.enumerate_decoding(params, 3, 3).trajectories()
    exact = LK.estimate_eps_block(params, trajs, 1, mode="exact")
    sampled = LK.estimate_eps_block(params, trajs, 1)
    assert exact == pytest.approx(O.exact_DN_and_eps(params, 3, 3, 1)[1])
    assert sampled <= exact + 1e-12


def test_stepmerge_bound_values():
    rep = LK.stepmerge_bound(4, 4, 4, 0.0, 0.0)
    assert rep.bound == pytest.approx(4 * math.log(2)) and rep.holds
    assert LK.stepmerge_bound(0, 3, 1, 0.7, 0.0).bound == 0.0
    rep = LK.stepmerge_bound(3, 6, 2, 0.5, 1.0)
    assert rep.bound == 3 * math.log(6 / 2 + 1) + 3 * 0.5


def test_tiny_exact_bound_holds():
    cfg = M.ModelConfig(vocab_size=4, n_output=3, d_model=8, n_heads=1, max_positions=4)
    params = M.init_params(cfg, np.random.default_rng(1), std=1.0)
    D_N, eps = O.exact_DN_and_eps(params, 3, 3, 1)
    assert LK.stepmerge_bound(3, 3, 1, eps, D_N).holds


def test_dn_csv(tmp_path, params):
    trajs = sample(params, "bidirectional", L=4, T=4, k=1, n=8)
    rows = LK.dn_sweep(params, trajs, [1, 2, 4])
    path = tmp_path / "dn.csv"
    LK.write_dn_csv(path, rows)
    lines = path.read_text().splitlines()
    assert lines[0] == "N,D_N,stderr,eps_block,bound,holds"
    assert lines[-1].startswith("4,0.0,0.0,")


def test_non_increasing_tolerates_noise():
    mk = lambda N, d, se: LK.BoundReport(N, 4, 4, d, "monte_carlo", 10, 0, 0, True, se)
    assert LK.is_non_increasing([mk(1, 1.0, 0.1), mk(2, 1.1, 0.1), mk(4, 0.0, 0.0)])
    assert not LK.is_non_increasing([mk(1, 1.0, 0.01), mk(2, 1.5, 0.01)])
