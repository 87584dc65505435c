"""Desk-scale workbench for reinforcement learning of masked diffusion language models.

Modules:

* ``diffmath``: reverse-mode autodiff on float64 numpy arrays
* ``model``: the toy transformer and its attention-mask constructors
* ``decoding``: schedules, samplers, trajectories, causality checks
* ``likelihood``: full / StepMerge / one-shot trajectory likelihoods and D_N
* ``rltrain``: group-relative policy optimisation
* ``tasks``: verifiable-reward toy tasks
* ``oracle``: exact enumeration for tiny instances
* ``pretrain``: denoising pre-training on task demonstrations
* ``checkpoint``, ``config``, ``cli``: persistence and the command line
"""

__version__ = "0.1.0"
