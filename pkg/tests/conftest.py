import numpy as np
import pytest

from iam.fixtures import FixtureSpec, make_fixture_pair
from iam.model import ModelConfig, init_model

TINY = ModelConfig(n_layers=3, n_query_heads=4, n_kv_heads=2, head_dim=8, ffn_dim=24, vocab_size=258)


def tiny_model(seed=0, cfg=TINY, **kw):
    kw.setdefault("qk_std", 0.3)
    return init_model(cfg, np.random.default_rng(seed), **kw)


@pytest.fixture(scope="session")
def tiny():
    return tiny_model()


@pytest.fixture(scope="session")
def pair():
    """Default fixture pair with a little noise and no head refit."""
    return make_fixture_pair(FixtureSpec(sigma=0.01, seed=0))


def random_prompt(rng, n, vocab=256):
    return [256] + rng.integers(0, vocab, size=n - 1).tolist()
