"""Two-level output head: cluster head, per-cluster token shards, pseudo logits.

Shards are stored token-major (``T_i x D``, rows copied from the dense head
``head`` which is ``V x D``) so that the logits of cluster ``i`` are
``shard_i @ x``. Tokens inside a shard are in ascending id order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..linalg import F32, matvec, rowdot, softmax


@dataclass(frozen=True)
class SelectionPolicy:
    p_min: float = 0.95
    k_min: int = 3
    k_max: int = 100

    def __post_init__(self):
        if not 0.0 < self.p_min <= 1.0:
            raise ValueError("p_min must lie in (0, 1]")
        if not 1 <= self.k_min <= self.k_max:
            raise ValueError("need 1 <= k_min <= k_max")

    @classmethod
    def from_config(cls, config) -> "SelectionPolicy":
        return cls(config.p_min, config.k_min, config.k_max)


def aggregate_cluster_probs(head_probs, assign, n_clusters: int | None = None, atol: float = 1e-6) -> np.ndarray:
    """Sum token probabilities per cluster. Accepts a batch ``[B, V]`` too."""
    p = np.asarray(head_probs, dtype=np.float64)
    assign = np.asarray(assign, dtype=np.int64)
    if p.shape[-1] != assign.shape[0]:
        raise ValueError("probability vector does not match the assignment")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > atol):
        raise ValueError("head probabilities do not sum to 1")
    n = int(assign.max()) + 1 if n_clusters is None else n_clusters
    if p.ndim == 1:
        return np.bincount(assign, weights=p, minlength=n)
    order = np.argsort(assign, kind="stable")
    sizes = np.bincount(assign, minlength=n)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    out = np.add.reduceat(p[:, order], np.minimum(starts, assign.size - 1), axis=1)
    out[:, sizes == 0] = 0.0
    return out


def kl_loss(target, predicted, eps: float = 1e-12) -> float:
    """``sum_i target_i * ln(target_i / predicted_i)``, zero-target terms dropped."""
    t = np.asarray(target, dtype=np.float64)
    q = np.asarray(predicted, dtype=np.float64)
    if np.any(t < 0) or np.any(q < 0):
        raise ValueError("probabilities must be non-negative")
    q = np.maximum(q, eps)
    nz = t > 0
    return float((t[nz] * np.log(t[nz] / q[nz])).sum())


def select_clusters(probs, policy: SelectionPolicy) -> np.ndarray:
    """Most probable clusters until the cumulative mass reaches ``p_min``,
    then widened to ``k_min`` and capped at ``k_max`` (both clipped to N)."""
    c = np.asarray(probs, dtype=np.float64)
    n = c.shape[0]
    order = np.argsort(-c, kind="stable")
    cum = np.cumsum(c[order])
    reached = np.flatnonzero(cum >= policy.p_min)
    count = int(reached[0]) + 1 if reached.size else n
    count = max(count, min(policy.k_min, n))
    count = min(count, policy.k_max, n)
    return order[:count]


def pseudo_logit(known_logits, p_known: float, n_unknown: int) -> float | None:
    """Shared logit for unknown tokens so their softmax mass is ``1 - p_known``.

    With ``S_k = sum(exp(known))`` the unknown tokens must sum to
    ``S_u = S_k (1 - p_known) / p_known`` in exp space; each gets
    ``log(S_u / n_unknown)``. Returns ``None`` when nothing is unknown or
    ``p_known == 1``.
    """
    if not p_known > 0:
        raise ValueError("known probability mass must be positive")
    if p_known > 1 + 1e-9:
        raise ValueError("known probability mass exceeds 1")
    if n_unknown <= 0 or p_known >= 1.0:
        return None
    z = np.asarray(known_logits, dtype=np.float64)
    shift = z.max()
    s_known = np.exp(z - shift).sum()
    s_unknown = s_known * (1.0 - p_known) / p_known
    return float(shift + math.log(s_unknown / n_unknown))


@dataclass
class HierHead:
    """Resident part of the hierarchical head: ``h1`` and the assignment."""

    h1: np.ndarray  # [D, N]
    assign: np.ndarray  # [V]
    order: np.ndarray  # tokens sorted by cluster, ascending id within a cluster
    offsets: np.ndarray  # [N + 1] start of each cluster in ``order``

    @classmethod
    def build(cls, h1, assign) -> "HierHead":
        assign = np.asarray(assign, dtype=np.int64)
        n = h1.shape[1]
        order = np.argsort(assign, kind="stable").astype(np.int32)
        offsets = np.concatenate([[0], np.cumsum(np.bincount(assign, minlength=n))]).astype(np.int64)
        return cls(h1=np.asarray(h1, F32), assign=assign, order=order, offsets=offsets)

    @property
    def n_clusters(self) -> int:
        return self.h1.shape[1]

    @property
    def vocab(self) -> int:
        return self.assign.shape[0]

    def tokens(self, cluster: int) -> np.ndarray:
        return self.order[self.offsets[cluster] : self.offsets[cluster + 1]]

    @property
    def index_nbytes(self) -> int:
        return self.order.nbytes + self.offsets.nbytes

    def cluster_probs(self, x) -> np.ndarray:
        return softmax(matvec(x, self.h1))


def build_shards(head, assign, n_clusters: int) -> dict[str, np.ndarray]:
    """Copy the dense head's token rows into one shard per cluster."""
    head = np.asarray(head)
    assign = np.asarray(assign)
    return {f"head.shard.{i}": head[np.flatnonzero(assign == i)].copy() for i in range(n_clusters)}


def reassemble_head(shards, assign, n_clusters: int) -> np.ndarray:
    """Inverse of :func:`build_shards`."""
    assign = np.asarray(assign, dtype=np.int64)
    order = np.argsort(assign, kind="stable")
    stacked = np.concatenate([shards[f"head.shard.{i}"] for i in range(n_clusters)], axis=0)
    out = np.empty_like(stacked)
    out[order] = stacked
    return out


@dataclass
class HierOutput:
    logits: np.ndarray
    selected: np.ndarray
    p_known: float
    pseudo: float | None
    bytes_fetched: int


def hier_forward(x, head: HierHead, store, policy: SelectionPolicy, meter=None) -> HierOutput:
    """Full-length logits from the selected clusters' shards plus pseudo logits.

    Shards are fetched from ``store`` as ``head.shard.<i>`` and released
    once their logits are computed.
    """
    c = head.cluster_probs(x)
    selected = select_clusters(c, policy)
    p_known = float(c[selected].sum())
    known_tokens = []
    known_logits = []
    fetched = 0
    for i in selected:
        name = f"head.shard.{i}"
        shard = store.fetch_tensor(name, meter=meter, tag="head")
        nbytes = store.nbytes(name)
        fetched += nbytes
        try:
            known_logits.append(rowdot(shard, x))
        finally:
            if meter is not None:
                meter.release("head", nbytes)
        known_tokens.append(head.tokens(int(i)))
    tokens = np.concatenate(known_tokens)
    values = np.concatenate(known_logits)
    n_unknown = head.vocab - tokens.size
    pseudo = pseudo_logit(values, min(p_known, 1.0), n_unknown) if n_unknown else None
    logits = np.full(head.vocab, -np.inf if pseudo is None else pseudo, dtype=F32)
    logits[tokens] = values
    return HierOutput(logits=logits, selected=selected, p_known=p_known, pseudo=pseudo, bytes_fetched=fetched)
