import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vtrigger import models

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def numeric_grad(f, arr, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    for i in np.ndindex(arr.shape):
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    """||a - b|| / max(||a||, ||b||), or 0 when the difference is below ``floor`` in absolute terms.

    The floor matters for tensors whose true gradient is exactly zero (e.g. key
    biases, which softmax is invariant to): there the finite-difference value
    is pure rounding noise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = np.linalg.norm(a - b)
    if diff <= floor:
        return 0.0
    return float(diff / max(np.linalg.norm(a), np.linalg.norm(b)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_encoder_config():
    return models.EncoderConfig(n_layers=2, d_model=8, n_heads=2, d_head=4, d_ff=16, input_dim=6, n_outputs=5)


@pytest.fixture
def micro_bilstm_config():
    return models.BiLstmConfig(n_layers=2, units_per_direction=3, input_dim=6, n_outputs=5)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
