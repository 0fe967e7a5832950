import numpy as np
import pytest

from qfnet.ir import ArchSpec, build_baseline_mini, build_friendly_mini
from qfnet.trainer import init_weights


def randomize_bn(g, seed=0):
    """Give every BN layer non-trivial statistics so folding is exercised."""
    rng = np.random.default_rng(seed)
    for layer in g.layers:
        if layer.kind == "batchnorm":
            c = layer.channels
            layer.gamma = rng.uniform(0.5, 1.5, c).astype(np.float32)
            layer.beta = rng.normal(0, 0.2, c).astype(np.float32)
            layer.mean = rng.normal(0, 0.3, c).astype(np.float32)
            layer.var = rng.uniform(0.2, 2.0, c).astype(np.float32)
    return g


@pytest.fixture
def baseline_graph():
    return randomize_bn(init_weights(build_baseline_mini(), 3), 3)


@pytest.fixture
def friendly_graph():
    return randomize_bn(init_weights(build_friendly_mini(), 4), 4)


@pytest.fixture
def small_spec():
    return ArchSpec(input_size=8, num_classes=4, stem_channels=4, block_channels=(6, 8), block_strides=(1, 2))


@pytest.fixture
def images():
    return np.random.default_rng(11).uniform(0, 1, (16, 16, 16, 1)).astype(np.float32)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
