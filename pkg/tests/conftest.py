import numpy as np
import pytest

from envcodegen import grammar as G
from envcodegen import tensor as T
from envcodegen.corpus import build_vocab
from envcodegen.model import ContextModel, ModelConfig
from envcodegen.synthetic import generate_synthetic
from tests.reporting import ACCEPTANCE

TOY = "start: S\nS -> 'a' S\nS -> 'b'\n"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _float64():
    T.set_precision(64)
    yield
    T.set_precision(64)


@pytest.fixture(scope="session")
def java():
    return G.load_java_grammar()


@pytest.fixture
def toy():
    return G.load_grammar(TOY)


@pytest.fixture(scope="session")
def corpus(java):
    return generate_synthetic(40, 0, java)


@pytest.fixture(scope="session")
def vocab(corpus, java):
    return build_vocab(corpus, java)


def tiny_config(**kw):
    base = dict(H=8, decoder_sym_embed=6, layers=1, dropout_p=0.0, batch_size=8)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model(vocab, java):
    return ContextModel(tiny_config(), vocab, java, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
