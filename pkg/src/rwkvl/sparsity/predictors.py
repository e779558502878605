"""Neuron-activation predictors and the mask-gathered FFN.

Masks are boolean arrays over the FFN hidden size ``F``; neuron ``j`` is
row ``j`` of both ``ffn.key_t`` and ``ffn.value``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..linalg import (
    F32,
    QuantTensor1b,
    ShapeError,
    fused_dequant_matvec,
    matvec,
    nearest_rank_index,
    quantize_1bit,
    relu,
    rowdot,
    sigmoid,
)


@dataclass
class MlpPredictor:
    L1: np.ndarray  # [D, hidden]
    L2: np.ndarray  # [hidden, F]
    threshold: float = 0.7

    @property
    def n_neurons(self) -> int:
        return self.L2.shape[1]

    def logits(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=F32)
        if x.shape[-1] != self.L1.shape[0]:
            raise ShapeError(f"predictor expects inputs of size {self.L1.shape[0]}, got {x.shape[-1]}")
        return matvec(relu(matvec(x, self.L1)), self.L2)

    def scores(self, x) -> np.ndarray:
        return sigmoid(self.logits(x))

    def predict(self, x) -> np.ndarray:
        return self.scores(x) >= self.threshold


@dataclass
class QuantPredictor:
    """1-bit shadow of ``W_k`` (``D x F``); selects neurons at or above a percentile."""

    wk: QuantTensor1b
    percentile: float = 0.8

    @property
    def n_neurons(self) -> int:
        return self.wk.cols

    def scores(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=F32)
        if x.ndim == 2:
            return np.stack([fused_dequant_matvec(row, self.wk) for row in x])
        return fused_dequant_matvec(x, self.wk)

    def predict(self, x) -> np.ndarray:
        s = self.scores(x)
        k = nearest_rank_index(s.shape[-1], self.percentile)
        tau = np.partition(s, k, axis=-1)[..., k : k + 1]
        return s >= tau


@dataclass
class EnsemblePredictor:
    mlp: MlpPredictor
    quant: QuantPredictor

    def __post_init__(self):
        if self.mlp.n_neurons != self.quant.n_neurons:
            raise ShapeError("ensemble components predict different numbers of neurons")

    def predict(self, x) -> np.ndarray:
        return self.mlp.predict(x) | self.quant.predict(x)

    @property
    def nbytes(self) -> int:
        return self.mlp.L1.nbytes + self.mlp.L2.nbytes + self.quant.wk.nbytes


def predict_mlp(x, p: MlpPredictor) -> np.ndarray:
    return p.predict(x)


def predict_quant(x, p: QuantPredictor) -> np.ndarray:
    return p.predict(x)


def predict_ensemble(x, e: EnsemblePredictor) -> np.ndarray:
    return e.predict(x)


def quant_predictor_from_keys(key_t, percentile: float = 0.8) -> QuantPredictor:
    """Build the 1-bit shadow from the neuron-major key matrix (``F x D``)."""
    return QuantPredictor(quantize_1bit(np.ascontiguousarray(np.asarray(key_t, F32).T)), percentile)


def ground_truth_mask(xk, key_t) -> np.ndarray:
    """Neurons whose squared-ReLU activation is nonzero."""
    act = relu(rowdot(key_t, xk)) ** 2
    return act > 0


def sparse_ffn(xk, mask, store, layer: int, meter=None) -> np.ndarray:
    """FFN restricted to the masked neurons, gathering only their weight rows.

    Reads ``popcount(mask)`` rows of ``ffn.key_t`` and of ``ffn.value``;
    with a meter, those bytes are charged to ``channel-mix`` for the duration
    of the call.
    """
    mask = np.asarray(mask, dtype=bool)
    kname, vname = f"blocks.{layer}.ffn.key_t", f"blocks.{layer}.ffn.value"
    n_neurons, dim = store.shape(kname)
    if mask.shape != (n_neurons,):
        raise ShapeError(f"mask of shape {mask.shape} does not match {n_neurons} neurons")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return np.zeros(dim, F32)
    keys = store.fetch_rows(kname, idx, meter=meter, tag="channel-mix")
    values = store.fetch_rows(vname, idx, meter=meter, tag="channel-mix")
    try:
        act = relu(rowdot(keys, xk)) ** 2
        return matvec(act, values)
    finally:
        if meter is not None:
            meter.release("channel-mix", idx.size * (store.row_nbytes(kname) + store.row_nbytes(vname)))


def pack_mask(mask) -> np.ndarray:
    return np.packbits(np.asarray(mask, dtype=bool), axis=-1, bitorder="little")


def unpack_mask(bits, n: int) -> np.ndarray:
    return np.unpackbits(bits, axis=-1, count=n, bitorder="little").astype(bool)
