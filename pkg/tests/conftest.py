import numpy as np
import pytest

from imbtext.encoder import EncoderConfig
from imbtext.model import Classifier, ModelConfig
from imbtext.numerics import Rng
from imbtext.pooling import HeadConfig


def small_model(pooling="hybrid", num_layers=1, d_model=8, heads=2, C=4, vocab=20, causal=False, freeze=False, seed=0):
    enc = EncoderConfig(vocab, d_model, heads, num_layers, max_len=16, attention_mode="causal" if causal else "bidirectional")
    return Classifier(ModelConfig(enc, HeadConfig(C), pooling, freeze), seed=seed)


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def nprng():
    return np.random.default_rng(0)
