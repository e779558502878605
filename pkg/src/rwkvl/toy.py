"""Small self-contained models for exercising the pipeline without a checkpoint.

Only the readout (``head``) is trained: the block stack stays at its random
initialization and the head learns next-token prediction from the frozen
hidden states. That is enough for greedy generation to follow the corpus
and for the head distributions to carry structure.
"""
from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .linalg import F32, TrainingError, softmax
from .rwkv_core import RwkvModel, init_model, markov_corpus


def next_token_loss(hidden, head, targets) -> float:
    z = np.asarray(hidden, np.float64) @ np.asarray(head, np.float64).T
    z = z - z.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-log_p[np.arange(len(targets)), targets].mean())


def train_readout(model: RwkvModel, corpus, epochs: int = 30, lr: float = 2.0, batch_size: int = 256, seed: int = 0):
    """Mini-batch SGD on next-token cross-entropy, updating only ``head``.

    Returns the per-epoch mean loss (first entry before training).
    """
    from .engine import collect_hidden

    corpus = np.asarray(list(corpus), dtype=np.int64)
    if corpus.size < 2:
        raise ValueError("corpus needs at least two tokens")
    hidden = collect_hidden(model, corpus[:-1]).astype(np.float64)
    targets = corpus[1:]
    head = model.tensors["head"].astype(np.float64)
    rng = np.random.default_rng(seed)
    losses = [next_token_loss(hidden, head, targets)]
    n = len(targets)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            p = softmax(hidden[idx] @ head.T)
            p[np.arange(idx.size), targets[idx]] -= 1.0
            head -= lr * (p.T @ hidden[idx]) / idx.size
        loss = next_token_loss(hidden, head, targets)
        if not np.isfinite(loss):
            raise TrainingError("readout training produced a non-finite loss")
        losses.append(loss)
    model.tensors["head"] = head.astype(F32)
    return losses


def toy_model(
    n_layers: int = 2,
    dim: int = 64,
    n_heads: int = 2,
    vocab: int = 512,
    seed: int = 0,
    train_tokens: int = 0,
    epochs: int = 30,
    **overrides,
) -> RwkvModel:
    """Random toy model, optionally with a readout trained on a Markov corpus."""
    cfg = ModelConfig(n_layers=n_layers, dim=dim, n_heads=n_heads, vocab=vocab, **overrides)
    model = init_model(cfg, seed=seed)
    if train_tokens:
        corpus = markov_corpus(vocab, train_tokens, seed=seed)
        model.meta["readout_loss"] = train_readout(model, corpus, epochs=epochs, seed=seed)
    return model
