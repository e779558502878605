"""Embedding cache hit rate against capacity for Zipf and uniform token streams."""
import numpy as np

from rwkvl.config import ModelConfig
from rwkvl.embed_cache import LruEmbeddingCache
from rwkvl.model_store import DictStore
from rwkvl.rwkv_core import init_model


def stream(kind, vocab, n, rng):
    if kind == "uniform":
        return rng.integers(0, vocab, n)
    ranks = np.arange(1, vocab + 1)
    p = 1.0 / ranks
    return rng.choice(vocab, n, p=p / p.sum())


def main():
    vocab = 8192
    store = DictStore(init_model(ModelConfig(n_layers=1, dim=16, n_heads=2, vocab=vocab)))
    rng = np.random.default_rng(0)
    print(f"{'capacity':>8} {'zipf':>7} {'uniform':>8}")
    for cap in (64, 256, 1000, 4096):
        rates = []
        for kind in ("zipf", "uniform"):
            cache = LruEmbeddingCache(cap)
            for t in stream(kind, vocab, 20000, rng):
                cache.get(t, store)
            rates.append(cache.hits / (cache.hits + cache.misses))
        print(f"{cap:>8} {rates[0]:>7.3f} {rates[1]:>8.3f}")


if __name__ == "__main__":
    main()
