import numpy as np
import pytest

from sparsedecode import ModelConfig, synth_weights

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(n_layers=8, n_heads=4, n_kv_heads=2, head_dim=16, d_ff=64, vocab_size=128)


@pytest.fixture(scope="session")
def tiny_weights(tiny_config):
    return synth_weights(tiny_config, 0)


@pytest.fixture
def criterion():
    """Context-manager factory that logs one PASS/FAIL line per acceptance criterion."""
    from contextlib import contextmanager

    @contextmanager
    def check(label):
        try:
            yield
        except BaseException as exc:
            ACCEPTANCE_LINES.append(f"FAIL  {label}  ({type(exc).__name__}: {exc})".splitlines()[0])
            raise
        ACCEPTANCE_LINES.append(f"PASS  {label}")

    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
