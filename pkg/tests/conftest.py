"""Shared test helpers: tiny deterministic models and corpora."""

import numpy as np
import pytest

from amom.data import SyntheticTaskSpec, generate_synthetic, synthetic_vocab
from amom.model import TransformerModel, toy_config
from amom.rng import INIT, RngStreams


def tiny_config(vocab_size=16, **overrides):
    """Smallest config that still exercises multi-head attention."""
    defaults = dict(d_model=16, n_heads=2, d_ffn=32, n_enc_layers=1,
                    n_dec_layers=1, dropout_rate=0.0, max_positions=32,
                    max_length_class=16)
    defaults.update(overrides)
    return toy_config(vocab_size, **defaults)


def tiny_model(seed=0, vocab_size=16, **overrides) -> TransformerModel:
    return TransformerModel(tiny_config(vocab_size, **overrides),
                            RngStreams(seed).get(INIT))


@pytest.fixture
def copy_corpus():
    spec = SyntheticTaskSpec(task="copy", vocab_size=16, len_min=3, len_max=8,
                             n_pairs=24, seed=5)
    return generate_synthetic(spec), synthetic_vocab(spec)
