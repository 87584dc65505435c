"""Toy masked diffusion transformer and its attention-mask constructors.

Vocabulary layout: ids ``0 .. n_output-1`` are the tokens the model can emit,
ids ``n_output .. vocab_size-2`` are prompt-only symbols, and the last id is
the mask token.  The output head only produces logits for emittable tokens.

Slots are 0-based: the prompt occupies ``0..L_P-1``, the completion
``L_P..L_P+L-1`` and, in the one-shot layout, the mask copies
``L_P+L..L_P+2L-1``.  Mask matrices are boolean ``(S, S)`` with
``mask[query, key]`` true when the query attends to the key.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import diffmath as dm


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_output: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    max_positions: int = 32
    mlp_ratio: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        if self.n_layers < 2:
            raise ModelError("n_layers must be >= 2")
        if not 1 <= self.n_output < self.vocab_size:
            raise ModelError("need 1 <= n_output < vocab_size (the last id is the mask token)")
        if self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")

    @property
    def mask_id(self) -> int:
        return self.vocab_size - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


ROLES = ("policy", "old", "ref")


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, dm.Array]
    role: str = "policy"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ModelError(f"unknown role {self.role!r}")

    def __getitem__(self, name: str) -> dm.Array:
        return self.arrays[name]

    def parameters(self) -> list[dm.Array]:
        return list(self.arrays.values())

    def snapshot(self, role: str) -> "ModelParams":
        """Deep, gradient-free copy (used for the stale and reference policies)."""
        arrays = {k: dm.Array(v.values.copy(), requires_grad=False, name=k) for k, v in self.arrays.items()}
        return ModelParams(self.config, arrays, role)

    def copy(self) -> "ModelParams":
        arrays = {k: dm.Array(v.values.copy(), requires_grad=True, name=k) for k, v in self.arrays.items()}
        return ModelParams(self.config, arrays, self.role)

    def zero_grad(self) -> None:
        for a in self.arrays.values():
            a.zero_grad()

    def n_params(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))


def init_params(
    config: ModelConfig,
    rng: np.random.Generator,
    *,
    std: float | None = None,
    tie_positions: bool = False,
) -> ModelParams:
    """Gaussian weights, unit layer-norm gains, zero biases.

    ``tie_positions`` gives every position the same embedding row, which makes
    all-mask inputs permutation symmetric.
    """
    std = config.init_std if std is None else std
    d, V = config.d_model, config.vocab_size
    h = config.mlp_ratio * d

    def normal(*shape):
        return rng.normal(0.0, std, size=shape)

    arrays: dict[str, np.ndarray] = {"tok_emb": normal(V, d)}
    if tie_positions:
        arrays["pos_emb"] = np.tile(normal(1, d), (config.max_positions, 1))
    else:
        arrays["pos_emb"] = normal(config.max_positions, d)
    for i in range(config.n_layers):
        p = f"layer{i}."
        arrays[p + "ln1.g"] = np.ones(d)
        arrays[p + "ln1.b"] = np.zeros(d)
        for w in ("wq", "wk", "wv", "wo"):
            arrays[p + w] = normal(d, d)
        arrays[p + "bo"] = np.zeros(d)
        arrays[p + "ln2.g"] = np.ones(d)
        arrays[p + "ln2.b"] = np.zeros(d)
        arrays[p + "w1"] = normal(d, h)
        arrays[p + "b1"] = np.zeros(h)
        arrays[p + "w2"] = normal(h, d)
        arrays[p + "b2"] = np.zeros(d)
    arrays["lnf.g"] = np.ones(d)
    arrays["lnf.b"] = np.zeros(d)
    arrays["head.w"] = normal(d, config.n_output)
    arrays["head.b"] = np.zeros(config.n_output)
    return ModelParams(config, {k: dm.Array(v, requires_grad=True, name=k) for k, v in arrays.items()})


class ForwardCounter:
    """Counts evaluated sequences (one per batch row)."""

    def __init__(self):
        self.count = 0


FORWARDS = ForwardCounter()


def mask_to_bias(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 0.0, dm.NEG_INF)


def forward(params: ModelParams, tokens, positions, mask) -> dm.Array:
    """Logits over emittable tokens for every slot.

    Accepts a single sequence (tokens ``(S,)``, mask ``(S, S)``) returning
    ``(S, n_output)``, or a batch (``(B, S)`` / ``(B, S, S)``) returning
    ``(B, S, n_output)``.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    single = tokens.ndim == 1
    if single:
        tokens, positions, mask = tokens[None], positions[None], mask[None]
    B, S = tokens.shape
    if positions.shape != (B, S) or mask.shape != (B, S, S):
        raise ModelError(f"tokens {tokens.shape}, positions {positions.shape} and mask {mask.shape} disagree")
    cfg = params.config
    if positions.min(initial=0) < 0 or positions.max(initial=0) >= cfg.max_positions:
        raise ModelError(f"position index outside [0, {cfg.max_positions})")
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= cfg.vocab_size:
        raise ModelError("token id outside the vocabulary")
    FORWARDS.count += B

    H = cfg.n_heads
    d = cfg.d_model
    dh = d // H
    bias = mask_to_bias(mask)
    x = dm.add(dm.embedding(params["tok_emb"], tokens), dm.embedding(params["pos_emb"], positions))
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        h = dm.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q = _split_heads(dm.matmul(h, params[p + "wq"]), B, S, H, dh)
        k = _split_heads(dm.matmul(h, params[p + "wk"]), B, S, H, dh)
        v = _split_heads(dm.matmul(h, params[p + "wv"]), B, S, H, dh)
        scores = dm.scale(dm.matmul(q, dm.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        attn = dm.softmax(dm.attention_bias_add(scores, bias))
        o = dm.reshape(dm.transpose(dm.matmul(attn, v), (0, 2, 1, 3)), (B, S, d))
        x = dm.add(x, dm.add(dm.matmul(o, params[p + "wo"]), params[p + "bo"]))
        h = dm.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        m = dm.gelu(dm.add(dm.matmul(h, params[p + "w1"]), params[p + "b1"]))
        x = dm.add(x, dm.add(dm.matmul(m, params[p + "w2"]), params[p + "b2"]))
    x = dm.layer_norm(x, params["lnf.g"], params["lnf.b"])
    logits = dm.add(dm.matmul(x, params["head.w"]), params["head.b"])
    if single:
        logits = dm.reshape(logits, (S, cfg.n_output))
    return logits


def _split_heads(a: dm.Array, B: int, S: int, H: int, dh: int) -> dm.Array:
    return dm.transpose(dm.reshape(a, (B, S, H, dh)), (0, 2, 1, 3))


def forward_flops(config: ModelConfig, seq_len: int) -> int:
    """Matmul FLOPs of one forward pass over a sequence of ``seq_len`` slots."""
    S, d = seq_len, config.d_model
    h = config.mlp_ratio * d
    per_layer = 2 * S * d * d * 4 + 2 * S * S * d * 2 + 2 * S * d * h * 2
    return config.n_layers * per_layer + 2 * S * d * config.n_output


# ---------------------------------------------------------------------------
# positions and attention masks


def default_positions(n_slots: int) -> np.ndarray:
    return np.arange(n_slots, dtype=np.int64)


def oneshot_positions(prompt_len: int, length: int) -> np.ndarray:
    """Clean slots keep their index; the mask copy of slot ``L_P+l`` reuses it."""
    base = np.arange(prompt_len + length, dtype=np.int64)
    return np.concatenate([base, base[prompt_len:]])


def _prompt_block(mask: np.ndarray, prompt_len: int) -> None:
    mask[:prompt_len, :prompt_len] = True


def build_bidirectional_mask(prompt_len: int, length: int) -> np.ndarray:
    S = prompt_len + length
    mask = np.zeros((S, S), dtype=bool)
    _prompt_block(mask, prompt_len)
    mask[prompt_len:, :] = True
    return mask


def build_decoding_mask(decode_step, t: int, prompt_len: int, n_steps: int | None = None) -> np.ndarray:
    """Any-order causal mask for the forward pass that produces step ``t``.

    ``decode_step[l]`` is the step at which completion position ``l`` is
    unmasked (steps run from ``T-1`` down to ``0``); entries may be ``-1`` for
    positions whose step is not decided yet (they are still masked at ``t``).

    * a decoded token (``t_l > t``) attends to the prompt, ``Omega_l`` and its
      own unmask set, i.e. every ``j`` with ``t_j >= t_l``;
    * a still-masked token attends to the prompt, every token decoded before
      ``t`` and itself.
    """
    ds = np.asarray(decode_step, dtype=np.int64)
    L = ds.size
    if n_steps is not None and not 0 <= t < n_steps:
        raise ModelError(f"step {t} outside [0, {n_steps})")
    if t < 0:
        raise ModelError(f"step {t} is negative")
    S = prompt_len + L
    mask = np.zeros((S, S), dtype=bool)
    _prompt_block(mask, prompt_len)
    mask[prompt_len:, :prompt_len] = True
    decoded = ds > t
    comp = mask[prompt_len:, prompt_len:]
    # decoded rows: j with t_j >= t_l
    comp[decoded] = ds[None, :] >= ds[decoded][:, None]
    # masked rows: decoded columns plus self
    comp[~decoded] = decoded[None, :]
    idx = np.flatnonzero(~decoded)
    comp[idx, idx] = True
    return mask


def build_oneshot_mask(decode_step, prompt_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Mask and positions for the ``L_P + 2L`` one-pass likelihood layout."""
    ds = np.asarray(decode_step, dtype=np.int64)
    L = ds.size
    if L and ds.min() < 0:
        raise ModelError("one-shot layout needs a decode step for every position")
    S = prompt_len + 2 * L
    mask = np.zeros((S, S), dtype=bool)
    _prompt_block(mask, prompt_len)
    c0, m0 = prompt_len, prompt_len + L
    mask[c0:, :prompt_len] = True
    mask[c0:m0, c0:m0] = ds[None, :] >= ds[:, None]
    mask[m0:, c0:m0] = ds[None, :] > ds[:, None]
    mask[np.arange(m0, S), np.arange(m0, S)] = True
    return mask, oneshot_positions(prompt_len, L)
