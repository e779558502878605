import hashlib
import json
import subprocess
import sys
from importlib import resources

import numpy as np
import pytest
from jsonschema import Draft202012Validator
from referencing import Registry, Resource

from rwkvl.cli import main
from rwkvl.engine import Engine, Techniques
from rwkvl.model_store import TensorStore, load_model
from rwkvl.rwkv_core import markov_corpus


def load_schemas():
    folder = resources.files("rwkvl") / "schemas"
    docs = {p.name: json.loads(p.read_text()) for p in folder.iterdir() if p.name.endswith(".schema.json")}
    registry = Registry().with_resources((d["$id"], Resource.from_contents(d)) for d in docs.values())
    return docs, registry


SCHEMAS, REGISTRY = load_schemas()


def check_schema(name, obj):
    Draft202012Validator(SCHEMAS[f"{name}.schema.json"], registry=REGISTRY).validate(obj)


def read_json(path):
    return json.loads(open(path).read())


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Build a model through every offline command once; tests inspect the outputs."""
    d = tmp_path_factory.mktemp("cli")
    base = d / "base.rwkvl"
    assert run("init-toy", "--dim", 64, "--layers", 2, "--heads", 2, "--vocab", 512, "--seed", 7, "--toy-train", 1500, "--epochs", 15, "--out", base) == 0
    comp = d / "comp.rwkvl"
    assert run("compress", "--in", base, "--out", comp, "--svd-k", 8) == 0
    built = d / "built.rwkvl"
    assert run("build-head", "--in", comp, "--out", built, "--clusters", 8) == 0
    head = d / "head.rwkvl"
    assert run("train-head", "--model", built, "--out", head, "--epochs", 30, "--samples", 400) == 0
    acts = d / "acts.bin"
    assert run("record-acts", "--model", head, "--layer", 0, "--samples", 100, "--out", acts) == 0
    full = d / "full.rwkvl"
    assert run("train-predictor", "--model", head, "--layer", 0, "--dataset", acts, "--out", full, "--epochs", 20) == 0
    assert run("train-predictor", "--model", full, "--layer", 1, "--samples", 200, "--epochs", 20) == 0
    return {"dir": d, "base": base, "comp": comp, "built": built, "head": head, "acts": acts, "full": full}


def test_reports_and_manifests_validate(pipeline):
    d = pipeline["dir"]
    pairs = [
        ("init_toy", pipeline["base"]),
        ("compress", pipeline["comp"]),
        ("build_head", pipeline["built"]),
        ("train_head", pipeline["head"]),
        ("record_acts", pipeline["acts"]),
        ("train_predictor", pipeline["full"]),
    ]
    for schema, out in pairs:
        report = read_json(f"{out}.report.json")
        check_schema(schema, report)
        manifest = read_json(f"{out}.manifest.json")
        check_schema("manifest", manifest)
        assert str(out) in manifest["outputs"]
    assert read_json(f"{pipeline['base']}.manifest.json")["config"]["dim"] == 64
    assert read_json(f"{pipeline['base']}.manifest.json")["seed"] == 7
    assert (d / "base.rwkvl.report.json").exists()


def test_init_toy_is_deterministic_and_trained(tmp_path):
    for name in ("a", "b"):
        assert run("init-toy", "--seed", 7, "--toy-train", 400, "--epochs", 5, "--out", tmp_path / name) == 0
    assert sha(tmp_path / "a") == sha(tmp_path / "b")
    rep = read_json(tmp_path / "a.report.json")
    check_schema("init_toy", rep)
    assert rep["readout_loss"]["final"] < rep["readout_loss"]["initial"]
    assert run("init-toy", "--seed", 8, "--out", tmp_path / "c") == 0
    assert sha(tmp_path / "a") != sha(tmp_path / "c")


def test_init_toy_usage_errors(tmp_path, capsys):
    assert run("init-toy", "--dim", 10, "--heads", 3, "--out", tmp_path / "x") == 2
    assert "divisible" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        run("init-toy")
    assert exc.value.code == 2


def test_compress_report(pipeline):
    rep = read_json(f"{pipeline['comp']}.report.json")
    before, after = rep["before"], rep["after"]
    D, L = 64, 2
    square = L * 5 * D * D * 2
    assert before["time-mix"] - after["time-mix"] + before["channel-mix"] - after["channel-mix"] == square - square // 4
    assert len(rep["tail_energy"]) == L * 5
    assert all(v >= 0 for v in rep["tail_energy"].values())


def test_compress_errors(pipeline, tmp_path):
    assert run("compress", "--in", pipeline["base"], "--out", tmp_path / "x", "--targets", "tm_r,tm_o") == 2
    assert run("compress", "--in", pipeline["base"], "--out", tmp_path / "x", "--targets", "bogus") == 2
    assert run("compress", "--in", pipeline["comp"], "--out", tmp_path / "x") == 2
    assert run("compress", "--in", tmp_path / "missing", "--out", tmp_path / "x") == 3


def test_compress_k1_preserves_outputs(tmp_path):
    base = tmp_path / "b"
    assert run("init-toy", "--seed", 2, "--float", "f32", "--out", base) == 0
    assert run("compress", "--in", base, "--out", tmp_path / "c", "--svd-k", 1) == 0
    with Engine(TensorStore(base), techniques=Techniques.none()) as a, Engine(TensorStore(tmp_path / "c"), techniques=Techniques.none()) as b:
        for t in markov_corpus(512, 10, seed=1):
            np.testing.assert_allclose(b.forward_token(t), a.forward_token(t), atol=1e-5, rtol=0)


def test_head_commands(pipeline, tmp_path):
    rep = read_json(f"{pipeline['head']}.report.json")
    assert rep["final_kl"] < rep["initial_kl"]
    model = load_model(pipeline["head"])
    assert sum(model.tensors[f"head.shard.{i}"].shape[0] for i in range(8)) == 512
    assert run("build-head", "--in", pipeline["base"], "--out", tmp_path / "x", "--clusters", 513) == 2
    assert run("train-head", "--model", pipeline["base"]) == 2


def test_head_with_one_cluster_per_token_is_exact(tmp_path):
    base = tmp_path / "b"
    assert run("init-toy", "--vocab", 64, "--seed", 3, "--out", base) == 0
    assert run("build-head", "--in", base, "--out", tmp_path / "h", "--clusters", 64) == 0
    store = TensorStore(tmp_path / "h")
    from rwkvl.hier_head import SelectionPolicy

    policy = SelectionPolicy(1.0, 1, 64)
    with Engine(store, policy=policy, techniques=Techniques(svd=True, sparsity=False, hier_head=True, embed_cache=False)) as a, Engine(
        store, techniques=Techniques.none()
    ) as b:
        for t in (1, 5, 9):
            np.testing.assert_allclose(a.forward_token(t), b.forward_token(t), atol=1e-5)


def test_record_and_train_predictor(pipeline, tmp_path):
    rep = read_json(f"{pipeline['acts']}.report.json")
    assert rep["samples"] == 100
    from rwkvl.sparsity import ActivationDataset

    assert len(ActivationDataset.load(pipeline["acts"])) == 100
    pr = read_json(f"{pipeline['full']}.report.json")
    m = pr["metrics"]
    assert m["ensemble"]["recall"] >= max(m["mlp"]["recall"], m["quant"]["recall"])
    assert run("record-acts", "--model", pipeline["head"], "--layer", 2, "--out", tmp_path / "x") == 2
    assert run("train-predictor", "--model", pipeline["head"], "--layer", 0, "--dataset", tmp_path / "missing") == 3
    assert run("train-predictor", "--model", pipeline["head"], "--layer", 0, "--samples", 50, "--lr", "1e12", "--out", tmp_path / "y") == 4


def test_train_predictor_rerun_is_identical(pipeline, tmp_path):
    outs = []
    for name in ("p1", "p2"):
        out = tmp_path / name
        assert run("train-predictor", "--model", pipeline["head"], "--layer", 0, "--dataset", pipeline["acts"], "--out", out, "--epochs", 5, "--seed", 3) == 0
        outs.append(read_json(f"{out}.report.json"))
    assert outs[0]["metrics"] == outs[1]["metrics"] and outs[0]["training"] == outs[1]["training"]
    assert sha(tmp_path / "p1") == sha(tmp_path / "p2")


def test_generate_strategies_and_ablations(pipeline, tmp_path, capsys):
    reports = {}
    for strategy in ("full", "layerwise"):
        out = tmp_path / f"{strategy}.json"
        assert run("generate", "--model", pipeline["full"], "--prompt-ids", "1,2,3", "--n", 12, "--strategy", strategy, "--report", out) == 0
        reports[strategy] = read_json(out)
        check_schema("generate", reports[strategy])
        check_schema("manifest", read_json(f"{out}.manifest.json"))
    printed = capsys.readouterr().out.split("\n")
    assert reports["full"]["tokens"] == reports["layerwise"]["tokens"]
    assert printed[0] == " ".join(map(str, reports["full"]["tokens"]))
    assert reports["layerwise"]["memory"]["peak_concurrent"] < reports["full"]["memory"]["peak_concurrent"]

    out = tmp_path / "hh.json"
    assert run("generate", "--model", pipeline["full"], "--n", 3, "--ablate", "hh", "--report", out) == 0
    store = TensorStore(pipeline["full"])
    head_bytes = store.nbytes("head") + store.nbytes("ln_out.w") + store.nbytes("ln_out.b")
    assert read_json(out)["memory"]["components"]["head"] == head_bytes
    assert read_json(out)["techniques"]["hier_head"] is False

    out = tmp_path / "none.json"
    assert run("generate", "--model", pipeline["full"], "--n", 0, "--report", out) == 0
    assert read_json(out)["tokens"] == []
    assert run("generate", "--model", pipeline["full"], "--ablate", "speed") == 2
    assert run("generate", "--model", pipeline["full"], "--strategy", "lazy") == 2
    assert run("generate", "--model", pipeline["full"], "--prompt-ids", "1,x") == 2
    assert run("generate", "--model", pipeline["full"], "--prompt-ids", "99999") == 2


def test_generate_default_report_path(pipeline):
    assert run("generate", "--model", pipeline["full"], "--n", 2) == 0
    rep = read_json(f"{pipeline['full']}.generate.json")
    assert len(rep["tokens"]) == 2


def test_all_ablated_matches_dense_base(pipeline, tmp_path):
    # the head and predictors ride on a compressed model, so compare with the compressed base
    outs = []
    for model, ablate in ((pipeline["full"], "svd,sparsity,hh,cache"), (pipeline["comp"], "svd,sparsity,hh,cache")):
        out = tmp_path / f"{len(outs)}.json"
        assert run("generate", "--model", model, "--n", 15, "--prompt-ids", "4 5 6", "--ablate", ablate, "--report", out) == 0
        outs.append(read_json(out)["tokens"])
    assert outs[0] == outs[1]


def test_bench(pipeline, tmp_path, capsys):
    out = tmp_path / "bench.json"
    assert run("bench", "--model", pipeline["full"], "--tokens", 4, "--repeat", 3, "--out", out) == 0
    rep = read_json(out)
    check_schema("bench", rep)
    assert len(rep["tps_samples"]) == 3
    assert rep["tps_median"] == sorted(rep["tps_samples"])[1]
    capsys.readouterr()
    assert run("bench", "--model", pipeline["full"], "--tokens", 2, "--repeat", 1) == 0
    check_schema("bench", json.loads(capsys.readouterr().out))
    assert run("bench", "--model", pipeline["full"], "--repeat", 0) == 2


def test_layerwise_is_not_faster(tmp_path):
    model = tmp_path / "m"
    assert run("init-toy", "--dim", 128, "--layers", 4, "--vocab", 2048, "--out", model) == 0
    tps = {}
    for strategy in ("full", "layerwise"):
        out = tmp_path / f"{strategy}.json"
        assert run("bench", "--model", model, "--tokens", 16, "--repeat", 3, "--strategy", strategy, "--ablate", "sparsity,hh", "--out", out) == 0
        tps[strategy] = read_json(out)["tps_median"]
    assert tps["layerwise"] <= tps["full"]


def test_validate(pipeline, tmp_path, capsys):
    assert run("validate", "--model", pipeline["full"]) == 0
    assert "ok" in capsys.readouterr().out
    bad = tmp_path / "bad"
    bad.write_bytes(open(pipeline["base"], "rb").read()[:200])
    assert run("validate", "--model", bad) == 3
    bad.write_bytes(b"garbage" * 20)
    assert run("validate", "--model", bad) == 3


def test_console_entry_point_and_log_level(pipeline, tmp_path):
    env = {"RWKVL_LOG": "debug", "PATH": "/usr/bin:/bin"}
    r = subprocess.run([sys.executable, "-m", "rwkvl.cli", "validate", "--model", str(pipeline["base"])], capture_output=True, text=True, env=env)
    assert r.returncode == 0 and "ok" in r.stdout
    r = subprocess.run([sys.executable, "-m", "rwkvl.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("rwkvl ")


def test_corpus_file_inputs(pipeline, tmp_path):
    np.save(tmp_path / "c.npy", markov_corpus(512, 60, seed=2))
    (tmp_path / "c.txt").write_text("1 2 3, 4 5")
    (tmp_path / "bad.txt").write_text("1 2 600")
    for corpus, samples in (("c.npy", 60), ("c.txt", 5)):
        out = tmp_path / f"{corpus}.bin"
        assert run("record-acts", "--model", pipeline["base"], "--layer", 1, "--corpus", tmp_path / corpus, "--out", out) == 0
        assert read_json(f"{out}.report.json")["samples"] == samples
    assert run("record-acts", "--model", pipeline["base"], "--layer", 1, "--corpus", tmp_path / "bad.txt", "--out", tmp_path / "x") == 2
