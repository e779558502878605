"""Memory-lean inference for small recurrent language models on numpy.

Low-rank square projections, predicted-sparse FFNs, a hierarchical output
head, an LRU embedding cache and a lazily loaded model file format, with a
meter that accounts for every resident byte.
"""
from .config import ModelConfig
from .engine import Engine, Sampler, Techniques, Workload, measure_ffn_sparsity, run_with_strategy
from .model_store import FULL, LAYERWISE, LoadStrategy, MemoryMeter, TensorStore, load_model, open_model, validate, write_model
from .rwkv_core import RwkvModel, init_model, markov_corpus

__version__ = "0.1.0"

__all__ = [
    "Engine",
    "FULL",
    "LAYERWISE",
    "LoadStrategy",
    "MemoryMeter",
    "ModelConfig",
    "RwkvModel",
    "Sampler",
    "Techniques",
    "TensorStore",
    "Workload",
    "init_model",
    "load_model",
    "markov_corpus",
    "measure_ffn_sparsity",
    "open_model",
    "run_with_strategy",
    "validate",
    "write_model",
]
