"""Shared fixtures and small factories for the test suite."""

import numpy as np
import pytest

from mlrf.fusion import FusionConfig
from mlrf.model import ModelConfig, Transformer

TOY = dict(
    n_layers=2, d_model=8, d_ff=16, n_heads=2,
    src_vocab=11, tgt_vocab=11, max_len=8,
)


def toy_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**TOY, **overrides})


def toy_fusion(side="none", kind="baseline", **overrides) -> FusionConfig:
    kw = dict(n_hop=3, d_a=16, d_f=12)
    kw.update(overrides)
    if side in ("encoder", "both"):
        kw["enc_kind"] = kind
    if side in ("decoder", "both"):
        kw["dec_kind"] = kind
    return FusionConfig(side=side, **kw)


def toy_model(side="none", kind="baseline", seed=3, **overrides) -> Transformer:
    return Transformer(toy_config(), toy_fusion(side, kind, **overrides), seed=seed)


def random_sentences(rng, count, max_len=5, vocab=11):
    """Packed (ids, lengths) with content ids in [4, vocab)."""
    lengths = [int(rng.integers(1, max_len + 1)) for _ in range(count)]
    ids = rng.integers(4, vocab, size=sum(lengths)).astype(np.int64)
    return ids, lengths


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
