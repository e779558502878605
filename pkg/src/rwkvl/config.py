from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters plus the inference-time thresholds.

    The FFN hidden size is ``round(ffn_mult * dim)`` rounded up to a multiple
    of 32 so that neuron masks pack into whole 32-bit words.
    """

    n_layers: int
    dim: int
    n_heads: int
    vocab: int = 65536
    ffn_mult: float = 3.5
    svd_k: int = 8
    mlp_threshold: float = 0.7
    quant_percentile: float = 0.8
    p_min: float = 0.95
    k_min: int = 3
    k_max: int = 100
    n_clusters: int = 200
    embed_cache_capacity: int = 1000
    predictor_hidden: int | None = None

    def __post_init__(self):
        if self.n_layers < 1 or self.dim < 1 or self.n_heads < 1 or self.vocab < 1:
            raise ValueError("n_layers, dim, n_heads and vocab must be positive")
        if self.dim % self.n_heads:
            raise ValueError(f"dim {self.dim} is not divisible by n_heads {self.n_heads}")
        if not 1 <= self.svd_k <= self.dim:
            raise ValueError(f"compression factor {self.svd_k} outside [1, {self.dim}]")
        for name in ("mlp_threshold", "quant_percentile"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not 0.0 < self.p_min <= 1.0:
            raise ValueError("p_min must lie in (0, 1]")
        if not 1 <= self.k_min <= self.k_max:
            raise ValueError("need 1 <= k_min <= k_max")
        if self.ffn_dim < self.dim:
            raise ValueError("FFN hidden size must be at least dim")

    @property
    def head_size(self) -> int:
        return self.dim // self.n_heads

    @property
    def ffn_dim(self) -> int:
        return math.ceil(round(self.ffn_mult * self.dim) / 32) * 32

    @property
    def rank(self) -> int:
        return max(1, self.dim // self.svd_k)

    @property
    def hidden(self) -> int:
        return self.predictor_hidden or max(1, self.dim // 2)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})
