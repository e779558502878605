"""``rwkvl`` command line: build toy models, compress, train predictors and
heads, generate and benchmark.

Every command writes a JSON report and a run manifest next to its main
output. Exit codes: 0 success, 2 usage, 3 format/IO, 4 numeric/training.
Set ``RWKVL_LOG`` to ``error``, ``info`` or ``debug`` for log output.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .engine import Engine, Sampler, Techniques
from .hier_head.training import build_hier_head, train_cluster_head
from .linalg import NumericError, TrainingError
from .lowrank import DEFAULT_TARGETS, compress_model
from .model_store import FormatError, LoadStrategy, TensorStore, float_dtype_of, load_model, validate, write_model
from .rwkv_core import markov_corpus
from .sparsity.predictors import EnsemblePredictor, quant_predictor_from_keys
from .sparsity.training import (
    ActivationDataset,
    attach_predictors,
    evaluate_predictor,
    record_activations,
    train_mlp_predictor,
)
from .toy import toy_model

log = logging.getLogger("rwkvl")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(ValueError):
    pass


# -- helpers ----------------------------------------------------------------


def _int_list(s: str) -> list[int]:
    s = s.strip()
    if not s:
        return []
    try:
        return [int(t) for t in s.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {s!r}") from None


def _dump(obj, path) -> str:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return str(path)


def _corpus(args, vocab: int) -> np.ndarray:
    if args.corpus:
        p = Path(args.corpus)
        toks = np.load(p) if p.suffix == ".npy" else np.array(_int_list(p.read_text()), dtype=np.int64)
        toks = np.asarray(toks, dtype=np.int64).ravel()
        if toks.size == 0:
            raise UsageError(f"corpus {p} is empty")
        if toks.min() < 0 or toks.max() >= vocab:
            raise UsageError(f"corpus {p} has token ids outside [0, {vocab})")
        return toks
    if args.samples < 1:
        raise UsageError("--samples must be positive")
    return markov_corpus(vocab, args.samples, seed=args.corpus_seed)


def _add_corpus_args(p, samples=500):
    p.add_argument("--corpus", help="token ids (.npy or whitespace/comma separated text); default is a synthetic Markov stream")
    p.add_argument("--samples", type=int, default=samples, help="length of the synthetic stream")
    p.add_argument("--corpus-seed", type=int, default=1)


def _strategy(s: str) -> LoadStrategy:
    try:
        return LoadStrategy.parse(s)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _techniques(s: str) -> Techniques:
    try:
        return Techniques.ablate(t.strip() for t in s.split(","))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _sampler(args) -> Sampler:
    return Sampler(mode=args.sampler, temperature=args.temperature, k=args.top_k, seed=args.seed)


def _save(model, path, float_dtype) -> dict:
    d = write_model(model, path, float_dtype=float_dtype)
    return {"path": str(path), "component_bytes": d.component_bytes(), "file_bytes": d.file_size}


def _in_place(args):
    return args.out or args.model


# -- commands ---------------------------------------------------------------


def cmd_init_toy(args):
    try:
        model = toy_model(
            n_layers=args.layers,
            dim=args.dim,
            n_heads=args.heads,
            vocab=args.vocab,
            seed=args.seed,
            train_tokens=args.toy_train,
            epochs=args.epochs,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = {"config": model.config.to_dict(), "model": _save(model, args.out, args.float)}
    if args.toy_train:
        losses = model.meta["readout_loss"]
        report["readout_loss"] = {"initial": losses[0], "final": losses[-1], "per_epoch": losses}
    return report, args.out


def cmd_compress(args):
    targets = [t.strip() for t in args.targets.split(",") if t.strip()]
    if any(t in ("tm_o", "att.W_o", "W_o", "o") for t in targets):
        raise UsageError("the output projection W_o is never decomposed")
    model = load_model(args.model)
    before = TensorStore(args.model).directory.component_bytes()
    try:
        out = compress_model(model, args.svd_k, targets, enhanced=args.enhanced, distill_steps=args.distill_steps, lr=args.lr, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    saved = _save(out, args.out, float_dtype_of(TensorStore(args.model)))
    report = {
        "k": args.svd_k,
        "targets": targets,
        "enhanced": args.enhanced,
        "before": before,
        "after": saved["component_bytes"],
        "tail_energy": out.meta["compression"]["tail_energy"],
        "model": saved,
    }
    return report, args.out


def cmd_build_head(args):
    model = load_model(args.model)
    try:
        a = build_hier_head(model, args.clusters, seed=args.seed, max_iters=args.max_iters)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _in_place(args)
    saved = _save(model, out, float_dtype_of(TensorStore(args.model)))
    report = {
        "n_clusters": a.n_clusters,
        "sizes": a.sizes.tolist(),
        "distortion": a.distortion,
        "model": saved,
    }
    return report, out


def cmd_train_head(args):
    model = load_model(args.model)
    if "head.h1" not in model.tensors:
        raise UsageError("model has no hierarchical head; run build-head first")
    corpus = _corpus(args, model.config.vocab)
    _, rep = train_cluster_head(model, corpus, epochs=args.epochs, lr=args.lr, seed=args.seed, batch_size=args.batch_size)
    out = _in_place(args)
    saved = _save(model, out, float_dtype_of(TensorStore(args.model)))
    return {"mean_kl": rep.kl, "initial_kl": rep.kl[0], "final_kl": rep.final_kl, "positions": int(corpus.size), "model": saved}, out


def _check_layer(model_or_store, layer):
    L = model_or_store.config.n_layers
    if not 0 <= layer < L:
        raise UsageError(f"layer {layer} out of range for a {L}-layer model")


def cmd_record_acts(args):
    model = load_model(args.model)
    _check_layer(model, args.layer)
    ds = record_activations(model, _corpus(args, model.config.vocab), args.layer)
    ds.save(args.out)
    return {"layer": args.layer, "samples": len(ds), "dim": ds.dim, "neurons": ds.n_neurons, "density": ds.density, "dataset": args.out}, args.out


def cmd_train_predictor(args):
    model = load_model(args.model)
    _check_layer(model, args.layer)
    cfg = model.config
    if args.dataset:
        ds = ActivationDataset.load(args.dataset)
    else:
        ds = record_activations(model, _corpus(args, cfg.vocab), args.layer)
    if ds.dim != cfg.dim or ds.n_neurons != cfg.ffn_dim:
        raise UsageError("activation dataset does not match the model's layer shape")
    mlp, rep = train_mlp_predictor(
        ds, epochs=args.epochs, lr=args.lr, seed=args.seed, hidden=args.hidden or cfg.hidden, threshold=cfg.mlp_threshold
    )
    quant = quant_predictor_from_keys(model.tensors[f"blocks.{args.layer}.ffn.key_t"], cfg.quant_percentile)
    ens = EnsemblePredictor(mlp, quant)
    attach_predictors(model, args.layer, ens)
    out = _in_place(args)
    saved = _save(model, out, float_dtype_of(TensorStore(args.model)))
    report = {
        "layer": args.layer,
        "samples": len(ds),
        "training": rep.to_dict(),
        "metrics": {
            "mlp": evaluate_predictor(mlp, ds),
            "quant": evaluate_predictor(quant, ds),
            "ensemble": evaluate_predictor(ens, ds),
        },
        "thresholds": {"mlp": cfg.mlp_threshold, "quant_percentile": cfg.quant_percentile},
        "model": saved,
    }
    return report, out


def _run_session(args, store, n_tokens):
    engine = Engine(store, strategy=_strategy(args.strategy), techniques=_techniques(args.ablate))
    try:
        t0 = time.perf_counter()
        tokens = engine.generate(_int_list(args.prompt_ids), n_tokens, _sampler(args))
        elapsed = time.perf_counter() - t0
        report = engine.report()
    finally:
        engine.close()
    return tokens, elapsed, report


def _techniques_dict(s):
    t = _techniques(s)
    return {"svd": t.svd, "sparsity": t.sparsity, "hier_head": t.hier_head, "embed_cache": t.embed_cache}


def cmd_generate(args):
    store = TensorStore(args.model)
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    tokens, _, memory = _run_session(args, store, args.n)
    print(" ".join(map(str, tokens)))
    report = {
        "tokens": tokens,
        "prompt": _int_list(args.prompt_ids),
        "strategy": str(_strategy(args.strategy)),
        "techniques": _techniques_dict(args.ablate),
        "memory": memory,
    }
    return report, args.report or f"{args.model}.generate.json"


def cmd_bench(args):
    store = TensorStore(args.model)
    if args.tokens < 1 or args.repeat < 1:
        raise UsageError("--tokens and --repeat must be positive")
    samples, memory = [], None
    for _ in range(args.repeat):
        _, elapsed, memory = _run_session(args, store, args.tokens)
        samples.append(args.tokens / elapsed if elapsed > 0 else float("inf"))
    report = {
        "model": str(args.model),
        "strategy": str(_strategy(args.strategy)),
        "techniques": _techniques_dict(args.ablate),
        "tokens": args.tokens,
        "repeat": args.repeat,
        "tps_samples": samples,
        "tps_median": statistics.median(samples),
        "memory": memory,
    }
    if not args.out:
        print(json.dumps(report, indent=2, sort_keys=True))
    return report, args.out or f"{args.model}.bench.json"


def cmd_validate(args):
    problems = validate(args.model)
    for p in problems:
        print(p)
    if problems:
        raise FormatError(f"{args.model}: {len(problems)} problem(s)")
    print(f"{args.model}: ok")
    return None, None


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rwkvl", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"rwkvl {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def command(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=fn)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--manifest", help="manifest path (default: next to the main output)")
        return p

    p = command("init-toy", cmd_init_toy, "write a randomly initialized toy model")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--vocab", type=int, default=512)
    p.add_argument("--toy-train", type=int, default=0, metavar="TOKENS", help="train the readout on a synthetic stream of this length")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--float", choices=("f16", "f32"), default="f16")
    p.add_argument("--out", required=True)

    p = command("compress", cmd_compress, "factorize square projections")
    p.add_argument("--in", dest="model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--svd-k", type=int, default=8)
    p.add_argument("--targets", default=",".join(DEFAULT_TARGETS))
    p.add_argument("--enhanced", action="store_true")
    p.add_argument("--distill-steps", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.05)

    p = command("build-head", cmd_build_head, "cluster embeddings and shard the head")
    p.add_argument("--in", dest="model", required=True)
    p.add_argument("--out")
    p.add_argument("--clusters", type=int, default=200)
    p.add_argument("--max-iters", type=int, default=50)

    p = command("train-head", cmd_train_head, "distill the cluster head from the dense head")
    p.add_argument("--model", required=True)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--batch-size", type=int)
    _add_corpus_args(p)

    p = command("record-acts", cmd_record_acts, "record channel-mix inputs and activation masks")
    p.add_argument("--model", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_corpus_args(p)

    p = command("train-predictor", cmd_train_predictor, "train and attach a layer's neuron predictors")
    p.add_argument("--model", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--dataset", help="activation dataset from record-acts (default: record one now)")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--hidden", type=int)
    _add_corpus_args(p)

    def session_args(p):
        p.add_argument("--model", required=True)
        p.add_argument("--prompt-ids", default="0")
        p.add_argument("--strategy", default="full", help="full, layerwise or layerwise:<prefetch depth>")
        p.add_argument("--ablate", default="", help="comma-separated subset of svd,sparsity,hh,cache to disable")
        p.add_argument("--sampler", choices=("greedy", "temperature", "top-k"), default="greedy")
        p.add_argument("--temperature", type=float, default=1.0)
        p.add_argument("--top-k", type=int, default=40)

    p = command("generate", cmd_generate, "generate token ids")
    session_args(p)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--report", help="memory report path (default: <model>.generate.json)")

    p = command("bench", cmd_bench, "tokens per second and peak memory")
    session_args(p)
    p.add_argument("--tokens", type=int, default=32)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--out", help="JSON output path (default: stdout)")

    p = command("validate", cmd_validate, "check a model file")
    p.add_argument("--model", required=True)
    return ap


def _setup_logging():
    level = os.environ.get("RWKVL_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    if level not in levels:
        log.error("unknown RWKVL_LOG value %r; using error", level)


def _flags(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "manifest")}


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        report, output = args.func(args)
        if output is not None:
            paths = [str(output)]
            if report is not None:
                report_path = output if args.command in ("generate", "bench") else f"{output}.report.json"
                paths.append(_dump(report, report_path))
            manifest = {
                "command": args.command,
                "version": __version__,
                "model": getattr(args, "model", None),
                "config": report.get("config") if report and "config" in report else None,
                "flags": _flags(args),
                "seed": args.seed,
                "outputs": sorted(set(paths)),
            }
            if manifest["config"] is None and getattr(args, "model", None) and Path(args.model).exists():
                manifest["config"] = TensorStore(args.model).config.to_dict()
            _dump(manifest, args.manifest or f"{output}.manifest.json")
        return EXIT_OK
    except UsageError as exc:
        print(f"rwkvl {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"rwkvl {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingError, NumericError, FloatingPointError) as exc:
        print(f"rwkvl {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (KeyError, ValueError) as exc:
        # malformed inputs that slipped past argument checks (e.g. missing tensors)
        print(f"rwkvl {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc, KeyError) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
