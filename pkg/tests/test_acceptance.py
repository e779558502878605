"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py``; the summary section at
the end of the run lists every criterion with its measured values.
"""
import hashlib
import time

import numpy as np

from rwkvl.config import ModelConfig
from rwkvl.embed_cache import LruEmbeddingCache
from rwkvl.engine import Engine, Techniques, measure_ffn_sparsity
from rwkvl.hier_head import (
    HierHead,
    SelectionPolicy,
    build_hier_head,
    hier_forward,
    reassemble_head,
    train_cluster_head,
)
from rwkvl.linalg import (
    dequantize_1bit,
    dequantize_int8,
    fused_dequant_matvec,
    matvec,
    quantize_1bit,
    quantize_int8_rowwise,
    softmax,
    truncated_svd,
)
from rwkvl.lowrank import SQUARE_TARGETS, compress_model
from rwkvl.model_store import FULL, LAYERWISE, DictStore, TensorStore, write_model
from rwkvl.rwkv_core import BlockState, channel_mix_forward, dense_ffn, init_model, markov_corpus
from rwkvl.sparsity import (
    ActivationDataset,
    EnsemblePredictor,
    attach_predictors,
    ground_truth_mask,
    predictor_metrics,
    quant_predictor_from_keys,
    record_activations,
    sparse_ffn,
    train_mlp_predictor,
)

from test_embed_cache import ListLru, emb_store, replay_hits


def sha(a):
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


def test_ac01_svd_optimality(criterion):
    with criterion(1, "truncated SVD error equals the oracle tail energy") as c:
        rng = np.random.default_rng(101)
        worst = 0.0
        t0 = time.perf_counter()
        for _ in range(100):
            w = rng.standard_normal((64, 64))
            f = truncated_svd(w, 8)
            err = np.linalg.norm(w - f.reconstruct().astype(np.float64))
            sv = np.linalg.svd(w, compute_uv=False)
            tail = np.sqrt((sv[8:] ** 2).sum())
            worst = max(worst, abs(err - tail) / tail)
        elapsed = time.perf_counter() - t0
        c.detail = f"(max rel dev {worst:.2e}, {elapsed:.2f} s)"
        assert worst <= 1e-6
        assert elapsed < 5.0


def test_ac02_compression_arithmetic(criterion, toy_config, tmp_path):
    with criterion(2, "square-projection bytes are exactly 2/k of dense") as c:
        model = init_model(toy_config, seed=1)
        dense = write_model(model, tmp_path / "dense").entries
        names = [f"blocks.{l}.{t}" for l in range(toy_config.n_layers) for t in SQUARE_TARGETS.values()]
        before = sum(dense[n].length for n in names)
        ratios = []
        for k in (4, 8, 16):
            comp = write_model(compress_model(model, k), tmp_path / f"k{k}").entries
            after = sum(comp[f"{n}.{s}"].length for n in names for s in "LR")
            assert after * k == 2 * before
            ratios.append(f"k={k}: {before}->{after}")
        c.detail = "(" + ", ".join(ratios) + ")"


def _random_state(rng, cfg):
    zero = BlockState.zeros(cfg)
    return BlockState(
        rng.standard_normal(cfg.dim).astype(np.float32),
        rng.standard_normal(cfg.dim).astype(np.float32),
        rng.standard_normal(zero.wkv.shape).astype(np.float32),
    )


def test_ac03_sparse_ffn_oracle_equivalence(criterion, full_toy):
    with criterion(3, "sparse FFN matches dense; ensemble error only from false negatives") as c:
        cfg = full_toy.config
        store = DictStore(full_toy)
        w = full_toy.block(0)
        key_t, value = w["ffn.key_t"], w["ffn.value"]
        with Engine(full_toy) as e:
            e.forward_token(0)
            pred = e._resident[1]["_pred"]
        rng = np.random.default_rng(303)
        worst_gt = worst_union = worst_attr = 0.0
        n_fn = 0
        for _ in range(1000):
            st = _random_state(rng, cfg)
            x = rng.standard_normal(cfg.dim).astype(np.float32)
            seen = {}

            def with_mask(kind):
                def ffn(xk):
                    truth = ground_truth_mask(xk, key_t)
                    mask = {"gt": truth, "ens": pred.predict(xk), "union": pred.predict(xk) | truth}[kind]
                    seen["xk"], seen["truth"] = xk, truth
                    return sparse_ffn(xk, mask, store, 0)

                return ffn

            dense, _ = channel_mix_forward(x, st, w)
            gt, _ = channel_mix_forward(x, st, w, ffn=with_mask("gt"))
            union, _ = channel_mix_forward(x, st, w, ffn=with_mask("union"))
            worst_gt = max(worst_gt, float(np.abs(gt - dense).max()))
            worst_union = max(worst_union, float(np.abs(union - dense).max()))
            # the ensemble's shortfall is exactly the contribution of the missed neurons
            out_ens = sparse_ffn(seen["xk"], pred.predict(seen["xk"]), store, 0)
            full_inner, act = dense_ffn(seen["xk"], key_t, value)
            missed = seen["truth"] & ~pred.predict(seen["xk"])
            n_fn += int(missed.sum())
            fn_part = act[missed].astype(np.float64) @ value[missed]
            worst_attr = max(worst_attr, float(np.abs(full_inner - out_ens - fn_part).max()))
        c.detail = f"(gt {worst_gt:.1e}, union {worst_union:.1e}, FN-attribution {worst_attr:.1e}, {n_fn} false negatives)"
        assert worst_gt <= 1e-6
        assert worst_union <= 1e-6
        assert worst_attr <= 1e-5


def test_ac04_ensemble_property(criterion, trained_toy):
    with criterion(4, "ensemble mask is the OR and its recall dominates both components") as c:
        corpus = markov_corpus(trained_toy.config.vocab, 400, seed=44)
        ds = record_activations(trained_toy, corpus, 1)
        mlp, _ = train_mlp_predictor(ds, epochs=20)
        quant = quant_predictor_from_keys(trained_toy.tensors["blocks.1.ffn.key_t"])
        ens = EnsemblePredictor(mlp, quant)
        m_mlp, m_q, m_e = ens.mlp.predict(ds.x), ens.quant.predict(ds.x), ens.predict(ds.x)
        assert np.array_equal(m_e, m_mlp | m_q)
        r = {name: predictor_metrics(m, ds.masks)["recall"] for name, m in (("mlp", m_mlp), ("quant", m_q), ("ens", m_e))}
        c.detail = f"(recall mlp {r['mlp']:.3f}, quant {r['quant']:.3f}, ensemble {r['ens']:.3f})"
        assert r["ens"] >= r["mlp"] and r["ens"] >= r["quant"]


def test_ac05_predictor_trainability(criterion):
    with criterion(5, "MLP predictor learns a separable activation dataset") as c:
        rng = np.random.default_rng(55)
        D, F, n = 64, 224, 2000
        # masks are the sign pattern of a rank-16 linear map, which a ReLU MLP with 32 hidden units can express
        a = rng.standard_normal((D, 16)) @ rng.standard_normal((16, F))
        x = rng.standard_normal((n, D))
        ds = ActivationDataset(x, x @ a > 0)
        t0 = time.perf_counter()
        _, rep = train_mlp_predictor(ds, epochs=200, lr=0.01, threshold=0.7, seed=0)
        elapsed = time.perf_counter() - t0
        c.detail = f"(recall {rep.recall:.4f}, precision {rep.precision:.4f}, {elapsed:.1f} s)"
        assert rep.recall >= 0.95
        assert rep.precision >= 0.8
        assert elapsed < 60


def test_ac06_hier_head_exactness_limit(criterion, full_toy):
    with criterion(6, "hierarchical head with every cluster equals the dense head") as c:
        n = full_toy.tensors["head.h1"].shape[1]
        policy = SelectionPolicy(1.0, 1, n)
        hier = Techniques(svd=True, sparsity=True, hier_head=True, embed_cache=True)
        dense = Techniques(svd=True, sparsity=True, hier_head=False, embed_cache=True)
        worst = 0.0
        with Engine(full_toy, policy=policy, techniques=hier) as a, Engine(full_toy, techniques=dense) as b:
            ta, tb = [], []
            la, lb = a.forward_token(1), b.forward_token(1)
            for _ in range(500):
                worst = max(worst, float(np.abs(la - lb).max()))
                ta.append(int(np.argmax(la)))
                tb.append(int(np.argmax(lb)))
                la, lb = a.forward_token(ta[-1]), b.forward_token(tb[-1])
        c.detail = f"(max |dlogit| {worst:.1e}, 500 greedy steps)"
        assert worst <= 1e-5
        assert ta == tb


def test_ac07_pseudo_logit_normalization(criterion, full_toy):
    with criterion(7, "pseudo logits keep softmax normalized with known mass P_known") as c:
        head = HierHead.build(full_toy.tensors["head.h1"], full_toy.tensors["head.assign"])
        store = DictStore(full_toy)
        policy = SelectionPolicy(0.95, 3, 100)
        rng = np.random.default_rng(707)
        worst_sum = worst_mass = 0.0
        n_pseudo = 0
        for _ in range(1000):
            x = rng.standard_normal(full_toy.config.dim).astype(np.float32)
            out = hier_forward(x, head, store, policy)
            p = softmax(out.logits)
            known = np.concatenate([head.tokens(int(i)) for i in out.selected])
            worst_sum = max(worst_sum, abs(p.sum() - 1.0))
            worst_mass = max(worst_mass, abs(p[known].sum() - out.p_known))
            n_pseudo += out.pseudo is not None
        c.detail = f"(sum dev {worst_sum:.1e}, mass dev {worst_mass:.1e}, {n_pseudo}/1000 with pseudo logits)"
        assert n_pseudo > 0
        assert worst_sum <= 1e-6 and worst_mass <= 1e-6


def test_ac08_shard_fidelity(criterion, full_toy, full_toy_file):
    with criterion(8, "reassembled shards reproduce the head bit-exactly") as c:
        n = full_toy.tensors["head.h1"].shape[1]
        assign = full_toy.tensors["head.assign"]
        mem = sha(reassemble_head(full_toy.tensors, assign, n)) == sha(full_toy.tensors["head"])
        store = TensorStore(full_toy_file)
        shards = {f"head.shard.{i}": store.fetch_tensor(f"head.shard.{i}") for i in range(n)}
        disk = sha(reassemble_head(shards, store.fetch_tensor("head.assign"), n)) == sha(store.fetch_tensor("head"))
        c.detail = f"(in memory {mem}, from file {disk})"
        assert mem and disk


def test_ac09_loading_strategies(criterion, full_toy_file, toy_file):
    with criterion(9, "full and layerwise loading agree; residency and byte accounting hold") as c:
        store = TensorStore(full_toy_file)
        prompt = [3, 1, 4]
        with Engine(store, FULL) as a:
            full = a.generate(prompt, 40)
        with Engine(store, LAYERWISE) as b:
            lw = b.generate(prompt, 40)
            largest = max(b.stage_nbytes(s) for s in range(1, store.config.n_layers + 1))
            stored = max(
                sum(store.nbytes(n) for n in store.primary_names() if n.startswith(f"blocks.{l}."))
                for l in range(store.config.n_layers)
            )
            block_peak = b.meter.block_peak
        assert full == lw
        assert block_peak <= 2 * max(largest, stored)
        plain = TensorStore(toy_file)
        with Engine(plain, FULL, Techniques.none()) as e:
            e.generate(prompt, 5)
            rep = e.report()
        directory = plain.directory.component_bytes()
        exact = all(rep["components"][k] == directory[k] for k in ("embedding", "time-mix", "channel-mix", "head"))
        c.detail = f"(40 tokens identical, layerwise block peak {block_peak} <= 2 x {max(largest, stored)}, directory match {exact})"
        assert exact and rep["analytic_matches"]


def test_ac10_embedding_cache(criterion):
    with criterion(10, "LRU cache matches the reference oracle; Zipf hit rate matches replay") as c:
        store = emb_store(vocab=300, dim=4)
        for seed in range(3):
            rng = np.random.default_rng(seed)
            cap = int(rng.integers(5, 80))
            cache, ref = LruEmbeddingCache(cap), ListLru(cap)
            for t in rng.integers(0, 300, 10_000):
                misses = cache.misses
                cache.get(t, store)
                assert ref.access(int(t)) == (cache.misses == misses)
                assert len(cache) <= cap
            assert cache.keys() == ref.order and cache.evictions == len(ref.evicted)
        V, cap = 65536, 1000
        rng = np.random.default_rng(1010)
        p = 1.0 / np.arange(1, V + 1) ** 1.1
        stream = rng.choice(V, size=100_000, p=p / p.sum())
        cache = LruEmbeddingCache(cap)
        big = emb_store(vocab=V, dim=2)
        for t in stream:
            cache.get(t, big)
        oracle = replay_hits(stream.tolist(), cap)
        c.detail = f"(Zipf hit rate {cache.hit_rate:.4f} vs uniform {cap / V:.4f})"
        assert cache.hits == oracle


def test_ac11_quantized_kernels(criterion):
    with criterion(11, "fused dequant-matvec matches the two-step reference") as c:
        rng = np.random.default_rng(1111)
        worst = {"i8": 0.0, "1b": 0.0}
        for _ in range(1000):
            rows, cols = int(rng.integers(1, 200)), int(rng.integers(1, 200))
            w = (rng.standard_normal((rows, cols)) * rng.uniform(0.01, 10)).astype(np.float32)
            x = rng.standard_normal(rows).astype(np.float32)
            for kind, q, deq in (("i8", quantize_int8_rowwise(w), dequantize_int8), ("1b", quantize_1bit(w), dequantize_1bit)):
                ref = matvec(x, deq(q)).astype(np.float64)
                scale = max(float(np.abs(ref).max()), 1e-30)
                worst[kind] = max(worst[kind], float(np.abs(fused_dequant_matvec(x, q) - ref).max()) / scale)
            q8 = quantize_int8_rowwise(w)
            s64 = q8.scales[:, None].astype(np.float64)
            assert np.all(np.abs(q8.values * s64 - w) <= s64 / 2 * (1 + 1e-12))
        c.detail = f"(max rel err int8 {worst['i8']:.1e}, 1-bit {worst['1b']:.1e})"
        assert worst["i8"] <= 1e-3 and worst["1b"] <= 1e-3


def test_ac12_sparsity_measurement(criterion, toy_config):
    with criterion(12, "random model sparsity is about one half; measurement matches dataset density") as c:
        model = init_model(toy_config, seed=1212)
        corpus = np.random.default_rng(12).integers(0, toy_config.vocab, 500)
        ratios = measure_ffn_sparsity(model, corpus)
        gaps = [abs((1 - ratios[l]) - record_activations(model, corpus, l).density) for l in range(toy_config.n_layers)]
        c.detail = "(sparsity " + ", ".join(f"{r:.3f}" for r in ratios) + f"; max density gap {max(gaps):.1e})"
        assert all(abs(r - 0.5) <= 0.05 for r in ratios)
        assert max(gaps) <= 1e-9


def paper_shaped_models(seed=13):
    """Vanilla and all-techniques versions of a V=65536 model whose embedding and head dominate."""
    cfg = ModelConfig(n_layers=4, dim=128, n_heads=2, vocab=65536)
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((200, cfg.dim))
    emb = centers[rng.integers(0, 200, cfg.vocab)] + 0.3 * rng.standard_normal((cfg.vocab, cfg.dim))
    emb = emb.astype(np.float32)
    vanilla = init_model(cfg, seed=seed, embeddings=emb, head=emb * 0.5)
    model = compress_model(vanilla, 8)
    model.meta = dict(model.meta)
    corpus = rng.integers(0, cfg.vocab, 300)
    for layer in range(cfg.n_layers):
        ds = record_activations(model, corpus, layer)
        mlp, _ = train_mlp_predictor(ds, epochs=20)
        quant = quant_predictor_from_keys(model.tensors[f"blocks.{layer}.ffn.key_t"], cfg.quant_percentile)
        attach_predictors(model, layer, EnsemblePredictor(mlp, quant))
    build_hier_head(model, n_clusters=cfg.n_clusters, seed=0, max_iters=10)
    train_cluster_head(model, corpus, epochs=30)
    return vanilla, model


def test_ac13_end_to_end_memory(criterion, tmp_path):
    with criterion(13, "all techniques cut logical peak bytes by at least 3x at k=8") as c:
        vanilla, model = paper_shaped_models()
        write_model(vanilla, tmp_path / "vanilla")
        write_model(model, tmp_path / "lite")
        prompt = [int(t) for t in np.random.default_rng(5).integers(0, 65536, 8)]
        with Engine(TensorStore(tmp_path / "vanilla"), FULL, Techniques.none()) as e:
            base_tokens = e.generate(prompt, 16)
            base = e.report()
        with Engine(TensorStore(tmp_path / "lite"), FULL, Techniques()) as e:
            e.generate(prompt, 16)
            lite = e.report()
        ratio = base["peak_concurrent"] / lite["peak_concurrent"]
        c.detail = f"(vanilla {base['peak_concurrent']} B, all techniques {lite['peak_concurrent']} B, {ratio:.1f}x)"
        assert len(base_tokens) == 16
        assert ratio >= 3.0
