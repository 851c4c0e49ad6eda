import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "code"))

from ngram_lm import load_arpa  # noqa: E402
from nnet import ConvSpec, ModelConfig  # noqa: E402

FIXTURES = Path(__file__).resolve().parent / "fixtures"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def tiny_lm():
    return load_arpa(FIXTURES / "tiny.arpa")


@pytest.fixture
def sentence_lm():
    return load_arpa(FIXTURES / "sentence.arpa")


@pytest.fixture
def toy_cfg():
    """Small smooth network: 16 features, one conv layer, two residual BiLSTMs."""
    return ModelConfig(
        cnn_layers=(ConvSpec(3, 5, 1, 2, 2),),
        lstm_layers=2,
        hidden_size=4,
        activation="tanh",
        alphabet_size=5,
        input_features=16,
    )


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("RESBILSTM_CACHE_DIR", str(tmp_path / "cache"))


def random_posts(rng, n_frames, n_symbols, concentration=1.0):
    return rng.dirichlet(np.full(n_symbols, concentration), size=n_frames)
