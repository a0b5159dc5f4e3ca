import numpy as np
import pytest

from syrenets import autodiff as ad
from syrenets.expr import ExprStore, StateLayout
from syrenets.mechanics import sample_dataset, sample_dataset_for
from syrenets.model import ArchConfig, HeadState, one_hot_params

SMALL = ArchConfig(n_layers=2, n_heads=3, latent_dim=4, selection_hidden=6, ae_hidden=(8, 8))
# one layer, one head: inputs (q1, q2, qd1, qd2, h), 40 candidates, qd1*qd1 at 34
ENGINEERED = ArchConfig(n_layers=1, n_heads=1, latent_dim=4, selection_hidden=8, ae_hidden=(8,))
QD1_SQUARED = 34


def exact_one_hot(layer, heads):
    P = np.asarray(ad.value_of(heads.P))
    hot = np.zeros_like(P)
    hot[np.arange(P.shape[0]), np.argmax(P, axis=1)] = 1.0
    return HeadState(hot, heads.S, heads.phi)


def engineered_params():
    return one_hot_params(ENGINEERED, {(0, 0): (QD1_SQUARED, 1.0)})


def free_particle(count, seed=0, stream=0):
    store = ExprStore(StateLayout(2))
    return sample_dataset_for(0.5 * store.qd(0) * store.qd(0), count, seed, stream=stream)


@pytest.fixture(scope="session")
def batch32():
    return sample_dataset(32, seed=123, stream=2)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
