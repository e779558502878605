"""Single-token RWKV block math and toy model construction.

Time-mix recurrence, per head with head size ``S``::

    x_c   = mix_c * x + (1 - mix_c) * prev_x          for c in r, k, v, g
    r, k, v, g = project(x_r), project(x_k), project(x_v), project(x_g)
    kv    = outer(k, v)                                # [S, S]
    out   = r @ (wkv + u[:, None] * kv)
    wkv'  = w[:, None] * wkv + kv                      # w = exp(-exp(decay))
    y     = (groupnorm(out) * silu(g)) @ W_o

Channel-mix::

    r   = sigmoid(project(x_r))
    y   = r * (relu(key_t @ x_k) ** 2 @ value)

``key_t`` and ``value`` are both stored ``F x D`` (one row per neuron).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .config import ModelConfig
from .linalg import F32, ShapeError, matvec, relu, rowdot, sigmoid
from .lowrank import apply_projection

GN_EPS = 64e-5
LN_EPS = 1e-5


def layer_norm(x, w, b):
    x = np.asarray(x, dtype=F32)
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return ((x - mu) / np.sqrt(var + LN_EPS) * w + b).astype(F32)


def group_norm(x, w, b, n_groups: int):
    g = np.asarray(x, dtype=F32).reshape(n_groups, -1)
    mu = g.mean(axis=1, keepdims=True)
    var = ((g - mu) ** 2).mean(axis=1, keepdims=True)
    return (((g - mu) / np.sqrt(var + GN_EPS)).ravel() * w + b).astype(F32)


def silu(x):
    return x * sigmoid(x)


@dataclass
class BlockState:
    tm_prev: np.ndarray  # [D]
    cm_prev: np.ndarray  # [D]
    wkv: np.ndarray  # [H, S, S]

    @classmethod
    def zeros(cls, config: ModelConfig) -> "BlockState":
        D, H, S = config.dim, config.n_heads, config.head_size
        return cls(np.zeros(D, F32), np.zeros(D, F32), np.zeros((H, S, S), F32))

    @property
    def nbytes(self) -> int:
        return self.tm_prev.nbytes + self.cm_prev.nbytes + self.wkv.nbytes

    def copy(self) -> "BlockState":
        return BlockState(self.tm_prev.copy(), self.cm_prev.copy(), self.wkv.copy())


def decay_factors(raw):
    """Map raw decay parameters into (0, 1)."""
    return np.exp(-np.exp(np.asarray(raw, dtype=np.float64))).astype(F32)


def _shift(x, prev, mix):
    return (mix * x + (1 - mix) * prev).astype(F32)


def time_mix_forward(x, state: BlockState, w, n_heads: int):
    """One time-mix step; ``w`` maps block-relative names (``att.W_r`` ...) to weights."""
    x = np.asarray(x, dtype=F32)
    D = x.shape[0]
    if state.tm_prev.shape != (D,) or D % n_heads:
        raise ShapeError(f"time-mix input of size {D} does not match state/heads")
    S = D // n_heads
    prev = state.tm_prev
    r = apply_projection(_shift(x, prev, w["att.mix_r"]), w, "att.W_r").reshape(n_heads, S)
    k = apply_projection(_shift(x, prev, w["att.mix_k"]), w, "att.W_k").reshape(n_heads, S)
    v = apply_projection(_shift(x, prev, w["att.mix_v"]), w, "att.W_v").reshape(n_heads, S)
    g = apply_projection(_shift(x, prev, w["att.mix_g"]), w, "att.W_g")
    decay = decay_factors(w["att.decay"]).reshape(n_heads, S)
    u = np.asarray(w["att.bonus"], dtype=F32).reshape(n_heads, S)

    kv = k[:, :, None] * v[:, None, :]
    out = np.einsum("hi,hij->hj", r, state.wkv + u[:, :, None] * kv).reshape(D)
    wkv = (decay[:, :, None] * state.wkv + kv).astype(F32)
    out = group_norm(out, w["att.gn.w"], w["att.gn.b"], n_heads)
    y = apply_projection((out * silu(g)).astype(F32), w, "att.W_o")
    return y, BlockState(tm_prev=x, cm_prev=state.cm_prev, wkv=wkv)


def dense_ffn(xk, key_t, value):
    """Return ``(relu(key_t @ xk) ** 2 @ value, activation)``."""
    act = relu(rowdot(key_t, xk)) ** 2
    return matvec(act, value), act


def channel_mix_forward(x, state: BlockState, w, ffn=None):
    """One channel-mix step.

    ``ffn`` replaces the dense FFN: it is called with the shifted key input
    and must return the FFN output (before receptance gating).
    """
    x = np.asarray(x, dtype=F32)
    if state.cm_prev.shape != x.shape:
        raise ShapeError("channel-mix input does not match state")
    prev = state.cm_prev
    xr = _shift(x, prev, w["ffn.mix_r"])
    xk = _shift(x, prev, w["ffn.mix_k"])
    r = sigmoid(apply_projection(xr, w, "ffn.W_r"))
    if ffn is None:
        out, _ = dense_ffn(xk, w["ffn.key_t"], w["ffn.value"])
    else:
        out = ffn(xk)
    return (r * out).astype(F32), replace(state, cm_prev=x)


# --------------------------------------------------------------------------
# in-memory model
# --------------------------------------------------------------------------


@dataclass
class RwkvModel:
    config: ModelConfig
    tensors: dict
    meta: dict = field(default_factory=dict)

    def block(self, layer: int) -> dict:
        prefix = f"blocks.{layer}."
        return {n[len(prefix):]: v for n, v in self.tensors.items() if n.startswith(prefix)}

    def copy(self) -> "RwkvModel":
        return RwkvModel(self.config, dict(self.tensors), dict(self.meta))


def init_block(config: ModelConfig, layer: int, rng) -> dict:
    """Random block weights with RWKV-style layer/channel ramps for mixes and decay."""
    D, F, L = config.dim, config.ffn_dim, config.n_layers
    ratio_0_to_1 = layer / max(1, L - 1)
    ratio_1_to_0 = 1.0 - layer / L
    ddd = np.arange(D) / D
    n = np.arange(D) / max(1, D - 1)
    std = 1.0 / np.sqrt(D)

    def normal(shape, s):
        return (rng.standard_normal(shape) * s).astype(F32)

    w = {
        "ln1.w": np.ones(D, F32),
        "ln1.b": np.zeros(D, F32),
        "ln2.w": np.ones(D, F32),
        "ln2.b": np.zeros(D, F32),
        "att.mix_r": (ddd ** (0.5 * ratio_1_to_0)).astype(F32),
        "att.mix_k": (ddd**ratio_1_to_0).astype(F32),
        "att.mix_v": np.minimum(ddd**ratio_1_to_0 + 0.3 * ratio_0_to_1, 1.0).astype(F32),
        "att.mix_g": (ddd ** (0.5 * ratio_1_to_0)).astype(F32),
        "att.decay": (-6.0 + 5.0 * n ** (0.7 + 1.3 * ratio_0_to_1)).astype(F32),
        "att.bonus": (ratio_0_to_1 * (1.0 - n) + 0.1 * ((np.arange(D) + 1) % 3 - 1)).astype(F32),
        "att.W_r": normal((D, D), std),
        "att.W_k": normal((D, D), std),
        "att.W_v": normal((D, D), std),
        "att.W_g": normal((D, D), std),
        "att.W_o": normal((D, D), std),
        "att.gn.w": np.ones(D, F32),
        "att.gn.b": np.zeros(D, F32),
        "ffn.mix_r": (ddd**ratio_1_to_0).astype(F32),
        "ffn.mix_k": (ddd**ratio_1_to_0).astype(F32),
        "ffn.W_r": normal((D, D), std),
        "ffn.key_t": normal((F, D), std),
        "ffn.value": normal((F, D), 1.0 / np.sqrt(F)),
    }
    if layer == 0:
        w["ln0.w"] = np.ones(D, F32)
        w["ln0.b"] = np.zeros(D, F32)
    return w


def init_model(config: ModelConfig, seed: int = 0, head_scale: float = 1.0, embeddings=None, head=None) -> RwkvModel:
    """Randomly initialized model; ``embeddings``/``head`` override those tensors."""
    rng = np.random.default_rng(seed)
    D, V = config.dim, config.vocab
    tensors = {"emb": rng.standard_normal((V, D)).astype(F32) if embeddings is None else np.asarray(embeddings, F32)}
    for layer in range(config.n_layers):
        for name, value in init_block(config, layer, rng).items():
            tensors[f"blocks.{layer}.{name}"] = value
    tensors["ln_out.w"] = np.ones(D, F32)
    tensors["ln_out.b"] = np.zeros(D, F32)
    if head is None:
        head = rng.standard_normal((V, D)) * (head_scale / np.sqrt(D))
    tensors["head"] = np.asarray(head, F32)
    if tensors["emb"].shape != (V, D) or tensors["head"].shape != (V, D):
        raise ShapeError("embedding and head must both be vocab x dim")
    return RwkvModel(config=config, tensors=tensors, meta={"seed": seed})


def markov_corpus(vocab: int, length: int, seed: int = 0, branching: int = 4) -> np.ndarray:
    """Token stream from a sparse random Markov chain (each token has
    ``branching`` likely successors); gives toy training something to learn."""
    rng = np.random.default_rng(seed)
    succ = rng.integers(0, vocab, size=(vocab, branching))
    out = np.empty(length, dtype=np.int64)
    t = int(rng.integers(vocab))
    for i in range(length):
        out[i] = t
        t = int(succ[t, rng.integers(branching)]) if rng.random() < 0.9 else int(rng.integers(vocab))
    return out
