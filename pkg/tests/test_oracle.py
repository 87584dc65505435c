import math

import numpy as np
import pytest

from d2bench import diffmath as dm
from d2bench import model as M
from d2bench import oracle as O


def tiny(L, V, seed, std=0.7):
    return O._tiny_params(L, V, np.random.default_rng(seed), std)


def test_single_slot_is_softmax_row():
    params = tiny(1, 2, 0)
    e = O.enumerate_decoding(params, 1, 1)
    assert len(e) == 2
    logits = M.forward(params, np.array([2]), np.arange(1), M.build_bidirectional_mask(0, 1)).values[0, :2]
    row = np.exp(logits - logits.max())
    row /= row.sum()
    assert np.allclose(np.sort(e.probs), np.sort(row), atol=1e-12)


@pytest.mark.parametrize("V", [2, 3])
def test_random_order_count_and_normalisation(V):
    e = O.enumerate_decoding(tiny(2, V, 1), 2, 2, k=1)
    assert len(e) == 2 * V**2 == O.count_trajectories(2, V, [1, 1], False)
    assert abs(e.probs.sum() - 1.0) < 1e-10
    assert np.allclose(e.order_logp, math.log(0.5))


def test_fixed_order_count():
    e = O.enumerate_decoding(tiny(3, 2, 2), 3, 3, order=[2, 1, 0])
    assert len(e) == 2**3
    assert abs(e.probs.sum() - 1.0) < 1e-10
    assert np.all(e.order_logp == 0.0)


@pytest.mark.parametrize("L,T,V", [(2, 2, 2), (3, 3, 2), (4, 2, 2), (3, 3, 3)])
@pytest.mark.parametrize("gen", ["bidirectional", "any_order"])
def test_grid_normalised(L, T, V, gen):
    e = O.enumerate_decoding(tiny(L, V, L * T * V), L, T, generator=gen)
    assert abs(e.probs.sum() - 1.0) < 1e-10


def test_budget_enforced():
    with pytest.raises(O.BudgetError):
        O.enumerate_decoding(tiny(5, 2, 0), 5, 5)
    with pytest.raises(O.BudgetError):
        O.enumerate_decoding(tiny(3, 3, 0), 3, 3, budget=O.EnumerationBudget(max_trajectories=10))


def test_constant_reward_zero_gradient():
    params = tiny(2, 2, 3)
    for g in (O.exact_policy_gradient(params, lambda p, c: 1.0, 2, 2),
              O.estimator_expected_gradient(params, lambda p, c: 1.0, 2, 2)):
        assert max(float(np.abs(v).max()) for v in g.values()) < 1e-12


def test_single_outcome_reward_matches_finite_differences():
    params = tiny(2, 2, 4)
    target = np.array([1, 0])

    def reward(prompt, c):
        return float(np.array_equal(c, target))

    def prob():
        e = O.enumerate_decoding(params, 2, 2)
        return float(e.probs[np.all(e.tokens == target, axis=1)].sum())

    g = O.exact_policy_gradient(params, reward, 2, 2)
    rng = np.random.default_rng(0)
    for name in ("tok_emb", "head.w"):
        a = params.arrays[name].values
        for idx in [tuple(rng.integers(0, s) for s in a.shape) for _ in range(3)]:
            old = a[idx]
            a[idx] = old + 1e-6
            up = prob()
            a[idx] = old - 1e-6
            down = prob()
            a[idx] = old
            fd = (up - down) / 2e-6
            assert abs(fd - g[name][idx]) <= 1e-6 * max(1.0, abs(fd)) + 1e-9


def test_linear_reward_term_by_term():
    params = tiny(2, 2, 5)
    e = O.enumerate_decoding(params, 2, 2)
    reward = O.table_reward(2, 2, np.random.default_rng(1))
    r = O.rewards_of(e, reward)
    g = O.exact_policy_gradient(params, reward, 2, 2)
    total = {n: np.zeros_like(v) for n, v in g.items()}
    for i in range(len(e)):
        def one():
            lp = O._differentiable_logp(params, e)
            return dm.index(dm.exp(lp), (np.array([i]),))
        params.zero_grad()
        with dm.Tape() as tape:
            tape.backward(dm.sum(one()))
        for n, a in params.arrays.items():
            if a.grad is not None:
                total[n] += r[i] * a.grad
    params.zero_grad()
    for n in g:
        assert np.allclose(g[n], total[n], atol=1e-13)


@pytest.mark.parametrize("L,T,V", [(2, 2, 2), (2, 2, 3), (3, 3, 2)])
def test_estimator_matches_exact_gradient(L, T, V):
    rng = np.random.default_rng([L, T, V])
    params = O._tiny_params(L, V, rng)
    reward = O.table_reward(V, L, rng)
    errs = O.gradient_relative_errors(O.estimator_expected_gradient(params, reward, L, T),
                                      O.exact_policy_gradient(params, reward, L, T))
    assert max(errs.values()) < 1e-6


def test_dn_trivial_cases():
    params = tiny(3, 2, 6)
    assert O.exact_DN_and_eps(params, 3, 3, 3) == (0.0, 0.0)
    flat = params.copy()
    for name, a in flat.arrays.items():
        a.values[:] = 1.0 if name.endswith(".g") else 0.0
    for N in (1, 3):
        D, eps = O.exact_DN_and_eps(flat, 3, 3, N)
        assert abs(D) < 1e-12 and abs(eps) < 1e-12


def test_dn_nonnegative_and_positive_when_contexts_differ():
    params = tiny(3, 2, 7, std=1.0)
    D, eps = O.exact_DN_and_eps(params, 3, 3, 1)
    assert D > 1e-6 and eps > 0


def test_equivalence_suite():
    cfg = M.ModelConfig(vocab_size=8, n_output=6, d_model=16, n_heads=2, max_positions=24)
    params = M.init_params(cfg, np.random.default_rng(0), std=0.3)
    rep = O.oneshot_equivalence_suite(params, 15, np.random.default_rng(1))
    assert rep.any_order_pass and rep.bidirectional_fails
    assert rep.to_dict()["any_order_pass"] is True


def test_length_one_equivalence_passes_both():
    cfg = M.ModelConfig(vocab_size=8, n_output=6, d_model=16, n_heads=2, max_positions=24)
    params = M.init_params(cfg, np.random.default_rng(0), std=0.3)
    rep = O.oneshot_equivalence_suite(params, 5, np.random.default_rng(1), max_L=1)
    assert rep.any_order_max_gap < 1e-12 and rep.bidirectional_max_gap < 1e-12


def test_verification_suite_all_pass():
    report = O.verification_suite(seed=0, draws=1)
    assert report["all_passed"], report
