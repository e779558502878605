"""Activation recording and MLP predictor training."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..linalg import F32, QuantTensor1b, TrainingError, relu, sigmoid
from ..model_store import FormatError
from .predictors import EnsemblePredictor, MlpPredictor, pack_mask, unpack_mask

_HEADER = struct.Struct("<III")


@dataclass
class ActivationDataset:
    """Channel-mix inputs ``x`` (``[n, D]``) with their ground-truth neuron masks (``[n, F]``)."""

    x: np.ndarray
    masks: np.ndarray
    layer: int | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=F32)
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.x.ndim != 2 or self.masks.ndim != 2 or self.x.shape[0] != self.masks.shape[0]:
            raise ValueError("inputs and masks must be [n, D] and [n, F] with matching n")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def n_neurons(self) -> int:
        return self.masks.shape[1]

    @property
    def density(self) -> float:
        return float(self.masks.mean()) if len(self) else 0.0

    def save(self, path) -> None:
        """Flat little-endian file: ``(D, F, n)`` then per sample D float32 and the packed mask."""
        n, d = self.x.shape
        f = self.n_neurons
        rec = np.zeros(n, dtype=[("x", "<f4", (d,)), ("m", "u1", ((f + 7) // 8,))])
        rec["x"] = self.x
        rec["m"] = pack_mask(self.masks)
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(d, f, n))
            fh.write(rec.tobytes())

    @classmethod
    def load(cls, path) -> "ActivationDataset":
        raw = Path(path).read_bytes()
        if len(raw) < _HEADER.size:
            raise FormatError(f"{path}: too short for an activation dataset")
        d, f, n = _HEADER.unpack_from(raw)
        dt = np.dtype([("x", "<f4", (d,)), ("m", "u1", ((f + 7) // 8,))])
        if len(raw) != _HEADER.size + n * dt.itemsize:
            raise FormatError(f"{path}: expected {n} records of {dt.itemsize} bytes")
        rec = np.frombuffer(raw, dtype=dt, offset=_HEADER.size, count=n)
        return cls(x=rec["x"].copy(), masks=unpack_mask(rec["m"], f))


def record_activations(model, corpus, layer: int) -> ActivationDataset:
    """Capture ``(x_k, act > 0)`` at the channel-mix of ``layer`` for every corpus token."""
    from ..engine import Engine, Techniques

    corpus = list(corpus)
    if not corpus:
        raise ValueError("corpus is empty")
    xs, masks = [], []

    def observe(at, xk, act):
        if at == layer:
            xs.append(np.array(xk, dtype=F32))
            masks.append(act > 0)

    with Engine(model, techniques=Techniques.none(), on_ffn=observe) as engine:
        if not 0 <= layer < engine.config.n_layers:
            raise ValueError(f"layer {layer} out of range")
        for t in corpus:
            engine.forward_token(t)
    return ActivationDataset(np.stack(xs), np.stack(masks), layer=layer)


def predictor_metrics(pred_masks, truth_masks) -> dict:
    """Per-sample precision, recall and predicted density, averaged over samples.

    A sample with an empty truth mask has recall 1; one with an empty
    prediction has precision 1.
    """
    pred = np.atleast_2d(np.asarray(pred_masks, dtype=bool))
    truth = np.atleast_2d(np.asarray(truth_masks, dtype=bool))
    if pred.shape != truth.shape or pred.shape[0] == 0:
        raise ValueError("need non-empty prediction and truth masks of equal shape")
    hit = (pred & truth).sum(axis=1)
    n_pred = pred.sum(axis=1)
    n_true = truth.sum(axis=1)
    recall = np.where(n_true > 0, hit / np.maximum(n_true, 1), 1.0)
    precision = np.where(n_pred > 0, hit / np.maximum(n_pred, 1), 1.0)
    return {
        "precision": float(precision.mean()),
        "recall": float(recall.mean()),
        "density": float((n_pred / pred.shape[1]).mean()),
    }


def evaluate_predictor(predictor, ds: ActivationDataset) -> dict:
    return predictor_metrics(predictor.predict(ds.x), ds.masks)


def bce_loss(logits, targets) -> float:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    # log(1 + e^z) - y z, stable for both signs
    return float((np.logaddexp(0.0, z) - y * z).mean())


@dataclass
class TrainReport:
    loss: list[float] = field(default_factory=list)  # mean BCE per epoch, before each update pass
    precision: float = 0.0
    recall: float = 0.0
    density: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.loss[-1]

    def to_dict(self) -> dict:
        return {
            "loss": self.loss,
            "final_loss": self.final_loss,
            "precision": self.precision,
            "recall": self.recall,
            "density": self.density,
        }


def init_mlp_predictor(dim: int, n_neurons: int, hidden: int, threshold: float = 0.7, seed: int = 0) -> MlpPredictor:
    rng = np.random.default_rng(seed)
    L1 = rng.normal(0.0, np.sqrt(2.0 / dim), size=(dim, hidden)).astype(F32)
    L2 = rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, n_neurons)).astype(F32)
    return MlpPredictor(L1, L2, threshold)


def train_mlp_predictor(
    ds: ActivationDataset,
    epochs: int = 50,
    lr: float = 0.01,
    seed: int = 0,
    hidden: int | None = None,
    threshold: float = 0.7,
    batch_size: int = 64,
    momentum: float = 0.9,
    init: MlpPredictor | None = None,
) -> tuple[MlpPredictor, TrainReport]:
    """Mini-batch SGD with momentum on per-neuron binary cross-entropy.

    The update follows the gradient of the batch-mean of the per-sample loss
    summed over neurons; reported losses are per-element means over the
    whole dataset. Returns the predictor and a :class:`TrainReport` whose
    ``loss`` has ``epochs + 1`` entries (the first is the initial loss).
    """
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    hidden = hidden if hidden is not None else max(1, ds.dim // 2)
    pred = init or init_mlp_predictor(ds.dim, ds.n_neurons, hidden, threshold, seed)
    L1 = pred.L1.astype(np.float64)
    L2 = pred.L2.astype(np.float64)
    x_all = ds.x.astype(np.float64)
    y_all = ds.masks.astype(np.float64)
    rng = np.random.default_rng(seed + 1)
    v1 = np.zeros_like(L1)
    v2 = np.zeros_like(L2)

    def full_loss():
        return bce_loss(relu(x_all @ L1) @ L2, y_all)

    report = TrainReport(loss=[full_loss()])
    for _ in range(epochs):
        order = rng.permutation(len(ds))
        for s in range(0, len(ds), batch_size):
            idx = order[s : s + batch_size]
            x, y = x_all[idx], y_all[idx]
            pre = x @ L1
            h = relu(pre)
            dz = (sigmoid(h @ L2) - y) / idx.size
            g2 = h.T @ dz
            g1 = x.T @ ((dz @ L2.T) * (pre > 0))
            v1 = momentum * v1 - lr * g1
            v2 = momentum * v2 - lr * g2
            L1 += v1
            L2 += v2
        loss = full_loss()
        # weights must also survive the float32 cast at the end
        big = max(np.abs(L1).max(), np.abs(L2).max())
        if not np.isfinite(loss) or not big < np.finfo(F32).max:
            raise TrainingError("predictor training diverged")
        report.loss.append(loss)
    out = MlpPredictor(L1.astype(F32), L2.astype(F32), threshold)
    m = evaluate_predictor(out, ds)
    report.precision, report.recall, report.density = m["precision"], m["recall"], m["density"]
    return out, report


def attach_predictors(model, layer: int, ensemble: EnsemblePredictor) -> None:
    """Store a layer's predictor tensors in ``model`` and record them in its metadata."""
    F = model.config.ffn_dim
    if ensemble.mlp.n_neurons != F or ensemble.mlp.L1.shape[0] != model.config.dim:
        raise ValueError("predictor shape does not match the model layer")
    wk: QuantTensor1b = ensemble.quant.wk
    prefix = f"blocks.{layer}.pred."
    model.tensors[prefix + "L1"] = np.asarray(ensemble.mlp.L1, F32)
    model.tensors[prefix + "L2"] = np.asarray(ensemble.mlp.L2, F32)
    model.tensors[prefix + "wk1b"] = wk
    layers = set(model.meta.get("predictor_layers", []))
    layers.add(layer)
    model.meta["predictor_layers"] = sorted(layers)
    hidden = dict(model.meta.get("predictor_hidden", {}))
    hidden[str(layer)] = int(ensemble.mlp.L1.shape[1])
    model.meta["predictor_hidden"] = hidden
