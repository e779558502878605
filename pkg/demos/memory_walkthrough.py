"""Build a toy model, switch on each memory technique and compare peak bytes.

Run with ``python3 demos/memory_walkthrough.py``. Takes a few seconds.
"""
import tempfile
from pathlib import Path

from rwkvl import FULL, LAYERWISE, LoadStrategy, TensorStore, Techniques, Workload, markov_corpus, run_with_strategy, write_model
from rwkvl.hier_head import build_hier_head, train_cluster_head
from rwkvl.lowrank import compress_model
from rwkvl.sparsity import EnsemblePredictor, attach_predictors, quant_predictor_from_keys, record_activations, train_mlp_predictor
from rwkvl.toy import toy_model


def with_all_techniques(base, k=8, clusters=16):
    model = compress_model(base, k)
    corpus = markov_corpus(model.config.vocab, 300, seed=1)
    for layer in range(model.config.n_layers):
        ds = record_activations(model, corpus, layer)
        mlp, rep = train_mlp_predictor(ds, epochs=20)
        quant = quant_predictor_from_keys(model.tensors[f"blocks.{layer}.ffn.key_t"], model.config.quant_percentile)
        attach_predictors(model, layer, EnsemblePredictor(mlp, quant))
        print(f"layer {layer}: predictor loss {rep.loss[0]:.3f} -> {rep.loss[-1]:.3f}")
    build_hier_head(model, n_clusters=clusters, seed=0)
    train_cluster_head(model, corpus, epochs=30)
    return model


def row(label, report):
    c = report["components"]
    parts = " ".join(f"{k}={v}" for k, v in c.items() if v)
    print(f"{label:<22} total={report['total']:>8}  {parts}")


def main():
    base = toy_model(n_layers=2, dim=64, vocab=2048, train_tokens=3000, seed=0)
    model = with_all_techniques(base)
    wl = Workload([5, 17, 42], 20)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "toy.rwkvl"
        write_model(model, path)
        store = TensorStore(path)
        print("\nlogical peak bytes per component (full load)")
        for label, tech in [
            ("vanilla", Techniques.none()),
            ("all techniques", Techniques()),
            ("without svd", Techniques.ablate(["svd"])),
            ("without sparsity", Techniques.ablate(["sparsity"])),
            ("without hier head", Techniques.ablate(["hh"])),
            ("without cache", Techniques.ablate(["cache"])),
        ]:
            _, rep = run_with_strategy(store, wl, FULL, tech)
            row(label, rep)
        full, rep_f = run_with_strategy(store, wl, FULL)
        lw, rep_l = run_with_strategy(store, wl, LAYERWISE)
        print(f"\nsame tokens under both strategies: {full == lw}")
        _, rep_0 = run_with_strategy(store, wl, LoadStrategy("layerwise", 0))
        print(f"block peak full={rep_f['block_peak']} layerwise={rep_l['block_peak']} layerwise:0={rep_0['block_peak']}")


if __name__ == "__main__":
    main()
