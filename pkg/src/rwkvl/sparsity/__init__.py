"""Neuron-activation predictors, the gathered sparse FFN and predictor training."""
from .predictors import (
    EnsemblePredictor,
    MlpPredictor,
    QuantPredictor,
    ground_truth_mask,
    predict_ensemble,
    predict_mlp,
    predict_quant,
    quant_predictor_from_keys,
    sparse_ffn,
)
from .training import (
    ActivationDataset,
    TrainReport,
    attach_predictors,
    evaluate_predictor,
    predictor_metrics,
    record_activations,
    train_mlp_predictor,
)

__all__ = [
    "ActivationDataset",
    "EnsemblePredictor",
    "MlpPredictor",
    "QuantPredictor",
    "TrainReport",
    "attach_predictors",
    "evaluate_predictor",
    "ground_truth_mask",
    "predict_ensemble",
    "predict_mlp",
    "predict_quant",
    "predictor_metrics",
    "quant_predictor_from_keys",
    "record_activations",
    "sparse_ffn",
    "train_mlp_predictor",
]
