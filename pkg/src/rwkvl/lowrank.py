"""Low-rank replacement of square projections.

Two forms are supported for a projection ``x @ W`` with ``W`` of shape
``M x M``:

* simple:   ``(x @ L) @ R`` with ``L = U diag(sigma)`` and ``R = V^T`` from
  the top ``M // k`` singular triplets of ``W``;
* enhanced: ``relu(x @ L) ** 2 @ R + x * d`` with a diagonal residual ``d``.

In a model the factors replace ``<name>`` by ``<name>.L``, ``<name>.R`` and
(enhanced only) ``<name>.d``; the dense tensor is dropped.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .linalg import F32, QuantTensorI8, ShapeError, TrainingError, as_matrix, fused_dequant_matvec, matvec, truncated_svd

log = logging.getLogger(__name__)

SQUARE_TARGETS = {"tm_r": "att.W_r", "tm_k": "att.W_k", "tm_v": "att.W_v", "tm_g": "att.W_g", "cm_r": "ffn.W_r"}
DEFAULT_TARGETS = tuple(SQUARE_TARGETS)


@dataclass
class LowRankPair:
    L: np.ndarray  # [M, r]
    R: np.ndarray  # [r, M]

    @property
    def rank(self) -> int:
        return self.L.shape[1]

    @property
    def n_params(self) -> int:
        return self.L.size + self.R.size

    def dense(self) -> np.ndarray:
        return (self.L.astype(np.float64) @ self.R.astype(np.float64)).astype(F32)


@dataclass
class EnhancedLowRank:
    L: np.ndarray  # [M, r]
    R: np.ndarray  # [r, M]
    d: np.ndarray  # [M]

    @property
    def rank(self) -> int:
        return self.L.shape[1]

    @property
    def n_params(self) -> int:
        return self.L.size + self.R.size + self.d.size


def decompose_projection(w, k: int) -> LowRankPair:
    w = as_matrix(w)
    m = w.shape[0]
    if w.shape[1] != m:
        raise ShapeError(f"projection must be square, got {w.shape}")
    if not 1 <= k <= m:
        raise ValueError(f"compression factor {k} outside [1, {m}]")
    f = truncated_svd(w, max(1, m // k))
    return LowRankPair(L=(f.U * f.sigma).astype(F32), R=np.ascontiguousarray(f.V.T))


def lowrank_forward(x, p: LowRankPair) -> np.ndarray:
    return matvec(matvec(x, p.L), p.R)


def enhanced_forward(x, e: EnhancedLowRank) -> np.ndarray:
    x = np.asarray(x, dtype=F32)
    if x.shape[-1] != e.L.shape[0] or e.d.shape[0] != e.R.shape[1]:
        raise ShapeError("input does not match enhanced factors")
    h = np.maximum(matvec(x, e.L), 0)
    return matvec(h * h, e.R) + x * e.d


def enhanced_grads(x, e: EnhancedLowRank, grad_out):
    """Gradients of ``sum(grad_out * enhanced_forward(x, e))`` w.r.t. ``L``, ``R``, ``d``.

    ``x`` and ``grad_out`` may be batches (``[B, M]``); gradients are summed.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
    z = x @ e.L
    h = np.maximum(z, 0)
    gR = (h * h).T @ g
    gh = g @ e.R.T
    gL = x.T @ (gh * 2 * h)
    gd = (g * x).sum(axis=0)
    return gL, gR, gd


def apply_projection(x, tensors, name: str) -> np.ndarray:
    """Project ``x`` through whichever form of ``name`` ``tensors`` holds."""
    w = tensors.get(name)
    if w is not None:
        if isinstance(w, QuantTensorI8):
            return fused_dequant_matvec(x, w)
        return matvec(x, w)
    L, R = tensors.get(name + ".L"), tensors.get(name + ".R")
    if L is None or R is None:
        raise KeyError(f"no dense or low-rank weights for {name!r}")
    d = tensors.get(name + ".d")
    if d is not None:
        return enhanced_forward(x, EnhancedLowRank(L, R, d))
    return lowrank_forward(x, LowRankPair(L, R))


# --------------------------------------------------------------------------
# distillation
# --------------------------------------------------------------------------


def init_enhanced(w, rank: int, seed: int = 0) -> EnhancedLowRank:
    """Small uniform factors scaled by 1/sqrt(M); ``d`` starts at ``diag(w)``."""
    w = as_matrix(w)
    m = w.shape[0]
    rng = np.random.default_rng(seed)
    s = 1.0 / np.sqrt(m)
    return EnhancedLowRank(
        L=rng.uniform(-s, s, (m, rank)).astype(F32),
        R=rng.uniform(-s, s, (rank, m)).astype(F32),
        d=np.diag(w).astype(F32).copy(),
    )


def _random_unit(rng, n, m):
    x = rng.standard_normal((n, m))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def distillation_loss(w, factors, x) -> float:
    """Mean squared output error ``mean_b ||x_b W - f(x_b)||^2``."""
    target = np.asarray(x, dtype=np.float64) @ w
    if isinstance(factors, EnhancedLowRank):
        h = np.maximum(x @ factors.L.astype(np.float64), 0)
        out = (h * h) @ factors.R + x * factors.d
    else:
        out = (x @ factors.L.astype(np.float64)) @ factors.R
    return float(((target - out) ** 2).sum(axis=1).mean())


def distill_lowrank(w, factors, steps: int, lr: float, seed: int = 0, batch: int = 64, eval_size: int = 1024):
    """Fit ``factors`` to reproduce ``x @ w`` by SGD on random unit inputs.

    Returns ``(trained_factors, history)`` where ``history`` holds the loss on
    a fixed evaluation batch before training and after every 10% of steps.
    The returned factors are whichever of the initial or final ones score
    lower on that batch.
    """
    w = as_matrix(w).astype(np.float64)
    m = w.shape[0]
    if steps < 0:
        raise ValueError("steps must be >= 0")
    rng = np.random.default_rng(seed)
    x_eval = _random_unit(rng, eval_size, m)
    enhanced = isinstance(factors, EnhancedLowRank)
    L = factors.L.astype(np.float64).copy()
    R = factors.R.astype(np.float64).copy()
    d = factors.d.astype(np.float64).copy() if enhanced else None

    def pack():
        if enhanced:
            return EnhancedLowRank(L.astype(F32), R.astype(F32), d.astype(F32))
        return LowRankPair(L.astype(F32), R.astype(F32))

    initial = distillation_loss(w, factors, x_eval)
    history = [initial]
    every = max(1, steps // 10)
    # overflow is reported as a TrainingError below, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, steps + 1):
            x = _random_unit(rng, batch, m)
            if enhanced:
                z = x @ L
                h = np.maximum(z, 0)
                err = (h * h) @ R + x * d - x @ w
                g = 2.0 * err / batch
                gR = (h * h).T @ g
                gL = x.T @ ((g @ R.T) * 2 * h)
                gd = (g * x).sum(axis=0)
                L -= lr * gL
                R -= lr * gR
                d -= lr * gd
            else:
                xl = x @ L
                err = xl @ R - x @ w
                g = 2.0 * err / batch
                gR = xl.T @ g
                gL = x.T @ (g @ R.T)
                L -= lr * gL
                R -= lr * gR
            if step % every == 0 or step == steps:
                loss = distillation_loss(w, pack(), x_eval)
                if not np.isfinite(loss):
                    raise TrainingError(f"distillation diverged at step {step} (lr={lr}, last finite loss {history[-1]:.3g})")
                history.append(loss)
    if steps == 0:
        return factors, history
    trained = pack()
    if history[-1] > initial:
        log.warning("distillation ended above its initial loss (%.3g > %.3g); keeping initial factors", history[-1], initial)
        return factors, history
    return trained, history


# --------------------------------------------------------------------------
# whole-model compression
# --------------------------------------------------------------------------


def compress_model(model, k: int, targets=DEFAULT_TARGETS, enhanced: bool = False, distill_steps: int = 0, lr: float = 0.05, seed: int = 0):
    """Return a copy of ``model`` with the targeted square projections factorized.

    With ``enhanced=True`` the enhanced form is initialized per
    :func:`init_enhanced` and distilled for ``distill_steps`` steps against
    the dense projection (it cannot be derived from an SVD directly).
    ``W_o`` can never be a target.
    """
    targets = tuple(targets)
    bad = [t for t in targets if t not in SQUARE_TARGETS]
    if bad:
        raise ValueError(f"invalid compression targets {bad}; W_o is never decomposed, valid: {sorted(SQUARE_TARGETS)}")
    if not targets:
        return model
    if model.meta.get("compression"):
        raise ValueError("model is already compressed")
    cfg = model.config
    if not 1 <= k <= cfg.dim:
        raise ValueError(f"compression factor {k} outside [1, {cfg.dim}]")
    rank = max(1, cfg.dim // k)
    tensors = dict(model.tensors)
    tails = {}
    for layer in range(cfg.n_layers):
        for t in targets:
            name = f"blocks.{layer}.{SQUARE_TARGETS[t]}"
            w = tensors.pop(name)
            f = truncated_svd(w, rank)
            full = np.linalg.svd(w.astype(np.float64), compute_uv=False)
            tails[name] = float(np.sqrt((full[rank:] ** 2).sum()))
            if enhanced:
                e = init_enhanced(w, rank, seed=seed + layer)
                if distill_steps:
                    e, _ = distill_lowrank(w, e, distill_steps, lr, seed=seed + layer)
                tensors[name + ".L"], tensors[name + ".R"], tensors[name + ".d"] = e.L, e.R, e.d
            else:
                tensors[name + ".L"] = (f.U * f.sigma).astype(F32)
                tensors[name + ".R"] = np.ascontiguousarray(f.V.T)
    meta = dict(model.meta)
    meta["compression"] = {"k": k, "rank": rank, "targets": list(targets), "enhanced": enhanced, "tail_energy": tails}
    return replace(model, tensors=tensors, meta=meta)
