# %% [markdown]
# # A tour of d2bench
#
# A tiny masked diffusion model, three ways to score its trajectories, and a
# short reinforcement-learning run.  Everything runs on a laptop CPU in about
# a minute.

# %%
import numpy as np

from d2bench import decoding as D
from d2bench import likelihood as LK
from d2bench import model as M
from d2bench import oracle as O
from d2bench import pretrain as P
from d2bench import rltrain as R
from d2bench import tasks

# %% [markdown]
# ## Sampling
#
# The copy task shows three prompt symbols; a good completion repeats them.
# We unmask one position per step for eight steps, in random order.

# %%
task = tasks.copy_task(length=8, prompt_len=3)
params = M.init_params(task.model_config(d_model=32), np.random.default_rng(1))
template = D.make_schedule(task.length, 8, 1, "random", np.random.default_rng(0))
trajs = LK.sample_trajectories(params, task.sample_prompt, template, 4, np.random.default_rng(2), "bidirectional")
for t in trajs:
    print(t.prompt, t.tokens, t.decode_step)

# %% [markdown]
# ## Pre-training and the one-shot shortcut
#
# A model trained with bidirectional attention needs one pass per step to
# score a trajectory.  A model trained with the any-order causal layout can
# be scored in a single pass, and that score is exact.

# %%
held = {}
for gen in ("bidirectional", "any_order"):
    held[gen] = P.demo_trajectories(task, 64, 8, 1, np.random.default_rng(99), gen)
    params_g = M.init_params(task.model_config(d_model=32), np.random.default_rng(1))
    params_g, log = P.pretrain(params_g, task, gen, 400, np.random.default_rng(0), T=8, k=1,
                               heldout=held[gen], eval_every=100)
    full = LK.batch_loglik(params_g, held[gen], "full").mean()
    one = LK.batch_loglik(params_g, held[gen], "oneshot").mean()
    print(f"{gen:14s} full {full:.3f}  one-shot {one:.3f}  gap {abs(full - one):.2e}")
    if gen == "bidirectional":
        bidir = params_g

# %% [markdown]
# ## Merging steps
#
# StepMerge scores every token from the context at the start of its segment.
# Fewer segments means fewer passes and a larger divergence ``D_N`` from the
# per-step decomposition; at ``N = T`` the two coincide.

# %%
trajs = LK.sample_trajectories(bidir, task.sample_prompt, template, 64, np.random.default_rng(4), "bidirectional")
for row in LK.dn_sweep(bidir, trajs, [1, 2, 4, 8]):
    print(f"N={row.N}  D_N={row.D_N:.3f} +- {row.stderr:.3f}  bound {row.bound:.2f}")

# %% [markdown]
# ## Exact checks on a tiny instance
#
# With two positions, two steps and two symbols the whole decoding tree can
# be listed, so the expected gradient of the trainer's surrogate can be
# compared with the gradient of the expected reward itself.

# %%
rng = np.random.default_rng(0)
tiny = O._tiny_params(2, 2, rng)
reward = O.table_reward(2, 2, rng)
errs = O.gradient_relative_errors(O.estimator_expected_gradient(tiny, reward, 2, 2),
                                  O.exact_policy_gradient(tiny, reward, 2, 2))
print("worst relative error", max(errs.values()))

# %% [markdown]
# ## A few RL steps
#
# Group-relative policy optimisation on the sortedness reward, from a random
# initialisation.

# %%
sorted_task = tasks.sorted_task(8)
cfg = R.TrainerConfig(N=2, T=4, k=2, lr=1e-3, flop_budget=5e9, eval_interval=1e9, eval_prompts=64)
state = R.train(cfg, sorted_task, model_config=sorted_task.model_config(d_model=16))
for rec in state.records:
    print(rec["step"], f"{rec['flops']:.2e}", round(rec["mean_reward"], 3))
