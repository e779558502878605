"""Building the hierarchical head for a model and distilling its cluster head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..linalg import F32, TrainingError, softmax
from .clustering import ClusterAssignment, kmeans_embeddings
from .head import aggregate_cluster_probs, build_shards


@dataclass
class ClusterHeadReport:
    kl: list[float] = field(default_factory=list)  # mean KL before training, then after each epoch

    @property
    def final_kl(self) -> float:
        return self.kl[-1]

    def to_dict(self) -> dict:
        return {"kl": self.kl, "final_kl": self.final_kl}


def init_cluster_head(dim: int, n_clusters: int, seed: int = 0, scale: float = 0.01) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((dim, n_clusters)) * scale).astype(F32)


def mean_kl(x, targets, h1) -> float:
    """Mean over rows of ``KL(targets || softmax(x @ h1))``."""
    t = np.asarray(targets, dtype=np.float64)
    z = np.asarray(x, dtype=np.float64) @ np.asarray(h1, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_q = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    safe_t = np.where(t > 0, t, 1.0)
    return float((t * (np.log(safe_t) - log_q)).sum(axis=1).mean())


def fit_cluster_head(x, targets, epochs: int = 30, lr: float = 1.0, seed: int = 0, h1=None, batch_size: int | None = None):
    """Gradient descent on the mean ``KL(targets || softmax(x @ H1))``.

    The gradient with respect to ``H1`` is ``x^T (softmax(x H1) - targets) / n``.
    Full-batch by default; ``batch_size`` switches to shuffled mini-batches.
    Returns ``(H1, report)``.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if x.shape[0] == 0 or x.shape[0] != t.shape[0]:
        raise ValueError("need matching, non-empty inputs and targets")
    w = (init_cluster_head(x.shape[1], t.shape[1], seed) if h1 is None else np.asarray(h1)).astype(np.float64)
    rng = np.random.default_rng(seed + 1)
    n = x.shape[0]
    bs = n if batch_size is None else batch_size
    report = ClusterHeadReport(kl=[mean_kl(x, t, w)])
    with np.errstate(over="ignore", invalid="ignore"):
        _fit_epochs(x, t, w, epochs, lr, bs, rng, report)
    return w.astype(F32), report


def _fit_epochs(x, t, w, epochs, lr, bs, rng, report):
    n = x.shape[0]
    for _ in range(epochs):
        order = np.arange(n) if bs >= n else rng.permutation(n)
        for s in range(0, n, bs):
            idx = order[s : s + bs]
            p = softmax(x[idx] @ w)
            w -= lr * (x[idx].T @ (p - t[idx])) / idx.size
        kl = mean_kl(x, t, w)
        if not np.isfinite(kl):
            raise TrainingError("cluster head training produced a non-finite loss")
        report.kl.append(kl)


def cluster_targets(hidden, head, assign, n_clusters: int) -> np.ndarray:
    """Dense-head token distribution of each hidden state summed per cluster."""
    logits = np.asarray(hidden, dtype=np.float64) @ np.asarray(head, dtype=np.float64).T
    return aggregate_cluster_probs(softmax(logits), assign, n_clusters)


def build_hier_head(model, n_clusters: int | None = None, seed: int = 0, max_iters: int = 50) -> ClusterAssignment:
    """Cluster the embeddings and add ``head.h1``/``head.assign``/``head.shard.<i>`` to ``model``.

    ``head.h1`` starts small and random; train it with :func:`train_cluster_head`.
    """
    n = n_clusters or model.config.n_clusters
    a = kmeans_embeddings(model.tensors["emb"], n, max_iters=max_iters, seed=seed)
    for name in [k for k in model.tensors if k.startswith("head.shard.")]:
        del model.tensors[name]
    model.tensors["head.h1"] = init_cluster_head(model.config.dim, n, seed)
    model.tensors["head.assign"] = a.assign.astype(np.uint32)
    model.tensors.update(build_shards(model.tensors["head"], a.assign, n))
    model.meta["hier_head"] = {"n_clusters": n}
    return a


def train_cluster_head(model, corpus, epochs: int = 30, lr: float = 1.0, seed: int = 0, batch_size: int | None = None):
    """Distill ``head.h1`` from the dense head over the corpus positions; updates ``model`` in place."""
    from ..engine import collect_hidden

    if "head.assign" not in model.tensors:
        raise ValueError("model has no hierarchical head; build one first")
    n = model.tensors["head.h1"].shape[1]
    hidden = collect_hidden(model, corpus)
    targets = cluster_targets(hidden, model.tensors["head"], model.tensors["head.assign"], n)
    h1, report = fit_cluster_head(hidden, targets, epochs, lr, seed, h1=model.tensors["head.h1"], batch_size=batch_size)
    model.tensors["head.h1"] = h1
    return h1, report
