from __future__ import annotations

import numpy as np
import pytest

from prefixmt import tensor as T
from prefixmt.corpus import WorldConfig, generate_world
from prefixmt.model import ModelConfig, Seq2Seq
from prefixmt.oracle import build_oracle


_ACCEPTANCE: dict[int, str] = {}


def record_acceptance(n: int, ok: bool, detail: str) -> None:
    """Print and remember one acceptance line; the terminal summary repeats them in order."""
    line = f"ACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}: {detail}"
    _ACCEPTANCE[n] = line
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])


@pytest.fixture(autouse=True)
def _fresh_tape():
    T.reset_tape()
    yield
    T.reset_tape()


@pytest.fixture(scope="session")
def small_corpus():
    return generate_world(WorldConfig(n_train=48, n_valid=12, n_test=12))


@pytest.fixture(scope="session")
def small_oracle(small_corpus):
    return build_oracle(small_corpus.world)


def tiny_model_config(vocab_size: int, **kw) -> ModelConfig:
    base = dict(vocab_size=vocab_size, d_b=16, d_c=64, k=3, n_layers=1, n_heads=2, d_ff=32,
                max_seq_len=40, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model(small_corpus):
    return Seq2Seq(tiny_model_config(len(small_corpus.vocab)), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
