from __future__ import annotations

import numpy as np
import pytest

from vrdu.model import DocModel, ModelConfig
from vrdu.synth import SyntheticSpec, build_synthetic_vocab, gen_synthetic_corpus

TINY = ModelConfig(layers=2, d=16, heads=2, ffn_dim=32, vocab_size=200,
                   max_text_len=128, k_1d=16, k_2d=8, bucket_width_2d=16)


@pytest.fixture(scope="session")
def vocab():
    return build_synthetic_vocab(200)


@pytest.fixture(scope="session")
def tiny_model():
    return DocModel(TINY, seed=11)


@pytest.fixture(scope="session")
def small_corpus(vocab):
    spec = SyntheticSpec(family="all", tokens_per_doc=20)
    return gen_synthetic_corpus(spec, 8, seed=5, vocab=vocab)


def rel_err(a: float, b: float) -> float:
    denom = max(abs(a), abs(b), 1e-8)
    return abs(a - b) / denom
