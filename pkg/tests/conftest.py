import numpy as np
import pytest

from rwkvl.config import ModelConfig
from rwkvl.model_store import write_model
from rwkvl.rwkv_core import init_model, markov_corpus
from rwkvl.toy import train_readout


@pytest.fixture(scope="session")
def toy_config():
    return ModelConfig(n_layers=2, dim=64, n_heads=2, vocab=512)


@pytest.fixture(scope="session")
def trained_toy(toy_config):
    """Toy model whose readout follows a Markov stream; treat as read-only."""
    model = init_model(toy_config, seed=7)
    train_readout(model, markov_corpus(toy_config.vocab, 1500, seed=7), epochs=20, lr=4.0)
    return model


@pytest.fixture(scope="session")
def toy_file(trained_toy, tmp_path_factory):
    path = tmp_path_factory.mktemp("models") / "toy.rwkvl"
    write_model(trained_toy, path)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def add_all_techniques(model, compress_k=8, n_clusters=16, seed=0):
    """Attach predictors to every layer and a trained hierarchical head; optionally compress."""
    from rwkvl.hier_head import build_hier_head, train_cluster_head
    from rwkvl.lowrank import compress_model
    from rwkvl.sparsity import EnsemblePredictor, attach_predictors, quant_predictor_from_keys, record_activations, train_mlp_predictor

    if compress_k:
        model = compress_model(model, compress_k)
    else:
        model = model.copy()
    model.meta = dict(model.meta)
    corpus = markov_corpus(model.config.vocab, 300, seed=seed + 1)
    for layer in range(model.config.n_layers):
        ds = record_activations(model, corpus, layer)
        mlp, _ = train_mlp_predictor(ds, epochs=20, seed=seed)
        quant = quant_predictor_from_keys(model.tensors[f"blocks.{layer}.ffn.key_t"], model.config.quant_percentile)
        attach_predictors(model, layer, EnsemblePredictor(mlp, quant))
    build_hier_head(model, n_clusters=n_clusters, seed=seed)
    train_cluster_head(model, corpus, epochs=30)
    return model


@pytest.fixture(scope="session")
def full_toy(trained_toy):
    """Compressed toy model with predictors on all layers and a hierarchical head."""
    return add_all_techniques(trained_toy)


@pytest.fixture(scope="session")
def full_toy_file(full_toy, tmp_path_factory):
    path = tmp_path_factory.mktemp("models") / "full.rwkvl"
    write_model(full_toy, path)
    return path


# -- acceptance reporting ---------------------------------------------------------

_ACCEPTANCE: list[tuple[int, str, bool, str]] = []


class _Criterion:
    def __init__(self, number, title):
        self.number = number
        self.title = title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = self.detail if ok else f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        _ACCEPTANCE.append((self.number, self.title, ok, detail))
        print(f"[{'PASS' if ok else 'FAIL'}] AC{self.number:02d} {self.title} {detail}".rstrip())
        return False


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c:`` records one pass/fail line; set ``c.detail`` for measured values."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] AC{number:02d} {title} {detail}".rstrip())
