import numpy as np
import pytest

from tokenflux.model import TEXT, VISUAL, ModelConfig, TokenSequence, init_model
from tokenflux.numerics import SeededRng

ACCEPTANCE_LINES = []


def make_sequence(n_v, n_t, d, seed, positions=None):
    rng = SeededRng(seed)
    emb = rng.normal_array((n_v + n_t, d))
    pos = np.arange(n_v + n_t) if positions is None else positions
    return TokenSequence([VISUAL] * n_v + [TEXT] * n_t, pos, emb)


@pytest.fixture
def small_config():
    return ModelConfig(num_layers=6, hidden_dim=16, ffn_dim=32, num_heads=2, vocab_size=11)


@pytest.fixture
def small_model(small_config):
    return init_model(small_config, seed=5)


@pytest.fixture
def small_seq():
    return make_sequence(12, 4, 16, seed=9)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
