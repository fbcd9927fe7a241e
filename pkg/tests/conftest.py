# conftest.py
import numpy as np
import pytest

from data_loader import dataset_from_frame, leave_one_out_split
from supernet_controllers import SupernetConfig, build_supernet
from synthetic_data import generate_markov_interactions
from tensor_core import set_default_dtype


@pytest.fixture(autouse=True)
def float64():
    """Gradient tolerances assume 64-bit floats."""
    set_default_dtype('float64')
    yield
    set_default_dtype('float64')


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def toy_frame():
    return generate_markov_interactions(n_users=40, n_items=15, min_len=5, max_len=8, seed=11)


@pytest.fixture
def toy_dataset(toy_frame):
    return dataset_from_frame(toy_frame)


@pytest.fixture
def toy_split(toy_dataset):
    return leave_one_out_split(toy_dataset)


@pytest.fixture
def tiny_cfg(toy_split):
    return SupernetConfig(
        num_items=toy_split.num_items,
        hidden_size=8,
        inner_size=8,
        max_seq_len=6,
        num_layers=2,
        num_heads=2,
        gamma_hidden=(0.0, 0.5),
        gamma_inner=(0.0, 0.5),
        gate_layers=2,
        dropout=0.1,
    )


@pytest.fixture
def tiny_net(tiny_cfg):
    return build_supernet(tiny_cfg, np.random.default_rng(1))


def numeric_gradient(fn, x, step=1e-4):
    """Central differences of a scalar function of one array."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        plus = x.copy()
        plus[idx] += step
        minus = x.copy()
        minus[idx] -= step
        grad[idx] = (fn(plus) - fn(minus)) / (2 * step)
    return grad


def relative_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-30))


@pytest.fixture
def finite_difference():
    return numeric_gradient


@pytest.fixture
def rel_error():
    return relative_error
