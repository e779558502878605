"""Inference sessions over a tensor store.

A session runs one token at a time through embedding, the block stack and
the head. What is resident is decided by the load strategy and by which
techniques are enabled:

* embedding rows come through an LRU cache (``embed_cache``) or from the
  whole embedding matrix;
* FFN neuron rows are gathered per token from the predicted mask
  (``sparsity``, for layers that carry predictors) or the FFN is loaded with
  the rest of the layer;
* the head is hierarchical (``hier_head``, if the model has one) or dense;
* low-rank projections are used as stored (``svd``) or expanded back to
  dense ``L @ R`` matrices.

Weights are grouped into stages: ``embed``, one per block, ``head``. Under
``full`` loading every stage is resident for the whole session; under
``layerwise`` loading a stage is fetched on entry (the next one is
prefetched on a background thread) and released on exit. Meter charges are
made on the calling thread so peaks are deterministic.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .embed_cache import LruEmbeddingCache
from .hier_head.head import HierHead, SelectionPolicy, hier_forward
from .linalg import F32, rowdot, softmax
from .model_store import FULL, LoadStrategy, MemoryMeter, as_store, component_of, memory_report
from .rwkv_core import BlockState, channel_mix_forward, dense_ffn, layer_norm, time_mix_forward
from .sparsity.predictors import EnsemblePredictor, MlpPredictor, QuantPredictor, sparse_ffn

log = logging.getLogger(__name__)

ABLATIONS = ("svd", "sparsity", "hh", "cache")


@dataclass(frozen=True)
class Techniques:
    svd: bool = True
    sparsity: bool = True
    hier_head: bool = True
    embed_cache: bool = True

    @classmethod
    def none(cls) -> "Techniques":
        return cls(False, False, False, False)

    @classmethod
    def ablate(cls, tags) -> "Techniques":
        tags = {t for t in tags if t}
        unknown = tags - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation tags {sorted(unknown)}; valid: {', '.join(ABLATIONS)}")
        return cls(
            svd="svd" not in tags,
            sparsity="sparsity" not in tags,
            hier_head="hh" not in tags,
            embed_cache="cache" not in tags,
        )


@dataclass
class Sampler:
    mode: str = "greedy"
    temperature: float = 1.0
    k: int = 1
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.mode not in ("greedy", "temperature", "top-k"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.k < 1:
            raise ValueError("top-k needs k >= 1")
        self._rng = np.random.default_rng(self.seed)

    def sample(self, logits) -> int:
        logits = np.asarray(logits)
        if self.mode == "greedy":
            return int(np.argmax(logits))
        z = logits.astype(np.float64) / self.temperature
        if self.mode == "top-k":
            k = min(self.k, z.size)
            top = np.argsort(-z, kind="stable")[:k]
            return int(top[self._rng.choice(k, p=softmax(z[top]))])
        return int(self._rng.choice(z.size, p=softmax(z)))


@dataclass
class _Item:
    key: str
    tag: str
    nbytes: int
    load: object  # () -> value
    fetched: bool = True


class Engine:
    """One inference session (recurrent states, cache, resident weights)."""

    def __init__(
        self,
        source,
        strategy: LoadStrategy = FULL,
        techniques: Techniques = Techniques(),
        meter: MemoryMeter | None = None,
        policy: SelectionPolicy | None = None,
        on_ffn=None,
        on_hidden=None,
    ):
        self.store = as_store(source)
        self.config = cfg = self.store.config
        self.strategy = strategy
        self.techniques = techniques
        self.meter = meter if meter is not None else MemoryMeter()
        self.policy = policy or SelectionPolicy.from_config(cfg)
        self.on_ffn = on_ffn
        self.on_hidden = on_hidden

        names = set(self.store.primary_names())
        self._names = names
        L = cfg.n_layers
        self.sparse_layers = {
            layer for layer in range(L) if techniques.sparsity and f"blocks.{layer}.pred.L1" in names
        }
        self.use_hier = techniques.hier_head and "head.h1" in names
        self.use_cache = techniques.embed_cache
        self.expand_lowrank = not techniques.svd
        self._plans = [self._plan(s) for s in range(L + 2)]
        self._resident: dict[int, dict] = {}
        self._pending = {}
        layerwise = strategy.kind == "layerwise"
        self._executor = ThreadPoolExecutor(1, thread_name_prefix="prefetch") if layerwise and strategy.prefetch_depth else None
        self.cache = LruEmbeddingCache(cfg.embed_cache_capacity, self.meter) if self.use_cache else None
        self.states: list[BlockState] = []
        self.last_hier = None
        self._state_bytes = 0
        self._scratch_bytes = cfg.vocab * 4
        self._closed = False
        self.meter.charge("scratch", self._scratch_bytes, fetched=False)
        self.reset()
        if not layerwise:
            for s in range(L + 2):
                self._acquire(s)

    # -- planning ---------------------------------------------------------

    @property
    def n_stages(self) -> int:
        return self.config.n_layers + 2

    def stage_nbytes(self, s: int) -> int:
        return sum(item.nbytes for item in self._plans[s])

    def _fetcher(self, name):
        return lambda: self.store.fetch_tensor(name)

    def _plan(self, s: int) -> list[_Item]:
        cfg = self.config
        store = self.store
        items = []
        if s == 0:
            if not self.use_cache:
                items.append(_Item("emb", "embedding", store.nbytes("emb"), self._fetcher("emb")))
            return items
        if s == cfg.n_layers + 1:
            for n in ("ln_out.w", "ln_out.b"):
                items.append(_Item(n, "head", store.nbytes(n), self._fetcher(n)))
            if self.use_hier:
                for n in ("head.h1", "head.assign"):
                    items.append(_Item(n, "head", store.nbytes(n), self._fetcher(n)))
                # cluster index derived from the assignment (order + offsets)
                n_clusters = store.shape("head.h1")[1]
                index_bytes = 4 * cfg.vocab + 8 * (n_clusters + 1)
                items.append(_Item("_index", "head", index_bytes, lambda: None, fetched=False))
            else:
                items.append(_Item("head", "head", store.nbytes("head"), self._fetcher("head")))
            return items

        layer = s - 1
        prefix = f"blocks.{layer}."
        sparse = layer in self.sparse_layers
        for name in sorted(n for n in self._names if n.startswith(prefix)):
            key = name[len(prefix):]
            if key.startswith("pred.") and not sparse:
                continue
            if sparse and key in ("ffn.key_t", "ffn.value"):
                continue
            if self.expand_lowrank and (key.endswith(".L") or key.endswith(".R") or key.endswith(".d")):
                base = name[:-2]
                if base + ".d" in self._names:
                    raise ValueError(f"{base} is an enhanced low-rank projection and cannot be expanded to dense")
                if key.endswith(".L"):
                    m = store.shape(name)[0]
                    itemsize = store.nbytes(name) // int(np.prod(store.shape(name)))
                    items.append(_Item(key[:-2], component_of(name), m * m * itemsize, self._expander(base)))
                continue
            items.append(_Item(key, component_of(name), store.nbytes(name), self._fetcher(name)))
        return items

    def _expander(self, base):
        def load():
            L = self.store.fetch_tensor(base + ".L").astype(np.float64)
            R = self.store.fetch_tensor(base + ".R").astype(np.float64)
            return (L @ R).astype(F32)

        return load

    # -- residency --------------------------------------------------------

    def _charge(self, s):
        for item in self._plans[s]:
            self.meter.charge(item.tag, item.nbytes, fetched=item.fetched)

    def _fetch(self, s) -> dict:
        values = {item.key: item.load() for item in self._plans[s]}
        cfg = self.config
        if s == cfg.n_layers + 1 and self.use_hier:
            values["_hier"] = HierHead.build(values["head.h1"], values["head.assign"])
        elif 1 <= s <= cfg.n_layers and (s - 1) in self.sparse_layers:
            values["_pred"] = EnsemblePredictor(
                MlpPredictor(values["pred.L1"], values["pred.L2"], cfg.mlp_threshold),
                QuantPredictor(values["pred.wk1b"], cfg.quant_percentile),
            )
        return values

    def _acquire(self, s) -> dict:
        values = self._resident.get(s)
        if values is not None:
            return values
        fut = self._pending.pop(s, None)
        if fut is not None:
            values = fut.result()
        else:
            self._charge(s)
            values = self._fetch(s)
        self._resident[s] = values
        return values

    def _prefetch(self, s):
        if s >= self.n_stages or s in self._resident or s in self._pending:
            return
        self._charge(s)
        self._pending[s] = self._executor.submit(self._fetch, s)

    def _release(self, s):
        if self._resident.pop(s, None) is None:
            return
        for item in self._plans[s]:
            self.meter.release(item.tag, item.nbytes)

    def _enter(self, s) -> dict:
        values = self._acquire(s)
        if self._executor is not None:
            for j in range(1, self.strategy.prefetch_depth + 1):
                self._prefetch(s + j)
        return values

    def _leave(self, s):
        if self.strategy.kind == "layerwise":
            self._release(s)

    # -- inference --------------------------------------------------------

    def reset(self):
        """Zero all recurrent states."""
        if self._state_bytes:
            self.meter.release("state", self._state_bytes)
        self.states = [BlockState.zeros(self.config) for _ in range(self.config.n_layers)]
        self._state_bytes = sum(st.nbytes for st in self.states)
        self.meter.charge("state", self._state_bytes, fetched=False)

    def _ffn(self, layer, w):
        if layer in self.sparse_layers:
            predictor = w["_pred"]

            def ffn(xk):
                mask = predictor.predict(xk)
                return sparse_ffn(xk, mask, self.store, layer, meter=self.meter)

            return ffn

        def ffn(xk):
            out, act = dense_ffn(xk, w["ffn.key_t"], w["ffn.value"])
            if self.on_ffn is not None:
                self.on_ffn(layer, xk, act)
            return out

        return ffn

    def forward_token(self, token: int) -> np.ndarray:
        """Advance all states by one token and return the logits over the vocabulary."""
        if self._closed:
            raise RuntimeError("session is closed")
        cfg = self.config
        token = int(token)
        if not 0 <= token < cfg.vocab:
            raise ValueError(f"token {token} outside vocabulary of {cfg.vocab}")

        w = self._enter(0)
        x = self.cache.get(token, self.store) if self.use_cache else w["emb"][token]
        x = np.asarray(x, dtype=F32)
        self._leave(0)

        for layer in range(cfg.n_layers):
            w = self._enter(layer + 1)
            st = self.states[layer]
            if layer == 0:
                x = layer_norm(x, w["ln0.w"], w["ln0.b"])
            dx, st = time_mix_forward(layer_norm(x, w["ln1.w"], w["ln1.b"]), st, w, cfg.n_heads)
            x = x + dx
            dx, st = channel_mix_forward(layer_norm(x, w["ln2.w"], w["ln2.b"]), st, w, ffn=self._ffn(layer, w))
            x = x + dx
            self.states[layer] = st
            self._leave(layer + 1)

        w = self._enter(cfg.n_layers + 1)
        x = layer_norm(x, w["ln_out.w"], w["ln_out.b"])
        if self.on_hidden is not None:
            self.on_hidden(x)
        if self.use_hier:
            self.last_hier = hier_forward(x, w["_hier"], self.store, self.policy, meter=self.meter)
            logits = self.last_hier.logits
        else:
            logits = rowdot(w["head"], x)
        self._leave(cfg.n_layers + 1)
        return logits

    def generate(self, prompt, n: int, sampler: Sampler | None = None) -> list[int]:
        """Feed ``prompt`` (token 0 if empty) and sample ``n`` continuation tokens."""
        if n < 0:
            raise ValueError("n must be >= 0")
        if n == 0:
            return []
        sampler = sampler or Sampler()
        logits = None
        for t in list(prompt) or [0]:
            logits = self.forward_token(t)
        out = []
        for i in range(n):
            nxt = sampler.sample(logits)
            out.append(nxt)
            if i + 1 < n:
                logits = self.forward_token(nxt)
        return out

    def report(self) -> dict:
        rep = memory_report(self.meter, self.store)
        if self.cache is not None:
            rep["cache"] = self.cache.stats()
        return rep

    def close(self):
        if self._closed:
            return
        for s, fut in list(self._pending.items()):
            fut.result()
            self._resident[s] = {}
        self._pending.clear()
        for s in list(self._resident):
            self._release(s)
        if self._executor is not None:
            self._executor.shutdown()
        if self.cache is not None:
            self.cache.clear()
        self.meter.release("state", self._state_bytes)
        self.meter.release("scratch", self._scratch_bytes)
        self._state_bytes = 0
        self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class Workload:
    prompt: list
    n: int
    sampler: dict = field(default_factory=dict)


def run_with_strategy(source, workload: Workload, strategy: LoadStrategy = FULL, techniques: Techniques = Techniques()):
    """Run a generation workload in a fresh session; returns ``(tokens, memory report)``."""
    engine = Engine(source, strategy=strategy, techniques=techniques)
    try:
        tokens = engine.generate(workload.prompt, workload.n, Sampler(**workload.sampler))
        report = engine.report()
    finally:
        engine.close()
    return tokens, report


def measure_ffn_sparsity(model, corpus) -> list[float]:
    """Mean fraction of exactly-zero squared-ReLU activations per layer."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("corpus is empty")
    L = model.config.n_layers if hasattr(model, "config") else as_store(model).config.n_layers
    totals = np.zeros(L)

    def observe(layer, xk, act):
        totals[layer] += float(np.mean(act == 0))

    with Engine(model, techniques=Techniques.none(), on_ffn=observe) as engine:
        for t in corpus:
            engine.forward_token(t)
    return (totals / len(corpus)).tolist()


def collect_hidden(model, corpus) -> np.ndarray:
    """Final normalized hidden state (head input) at every corpus position, ``[n, D]``."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("corpus is empty")
    xs = []
    with Engine(model, techniques=Techniques.none(), on_hidden=lambda x: xs.append(np.array(x, dtype=F32))) as engine:
        for t in corpus:
            engine.forward_token(t)
    return np.stack(xs)
