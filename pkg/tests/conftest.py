import numpy as np
import pytest

from kvparity.kv import ModelConfig


@pytest.fixture
def tiny_model():
    # 2 layers, 4 KV heads of 8, split over 4 workers: 16-byte rows
    return ModelConfig(layers=2, kv_heads=4, head_dim=8, tp_degree=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
