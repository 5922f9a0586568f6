import numpy as np
import pytest

from finer.ic import BaselineSet, Encoded
from finer.net import cnn, fit, mlp, TrainConfig
from finer.task import TaskSpec, Vectorizer, generate_dataset

SMALL = TaskSpec(n_train_benign=80, n_train_risk=60, n_test_benign=20, n_test_risk=20,
                 ic_count=(3, 8), max_len=64, seed=5, embed_seed=6)


@pytest.fixture(scope="session")
def small_ds():
    return generate_dataset(SMALL)


@pytest.fixture(scope="session")
def phi(small_ds):
    return Vectorizer.from_spec(small_ds.spec)


@pytest.fixture(scope="session")
def encoded(small_ds, phi):
    return Encoded.build(small_ds.train, phi), Encoded.build(small_ds.test, phi)


@pytest.fixture(scope="session")
def trained(encoded, phi):
    tr, _ = encoded
    return fit(cnn(*phi.shape, channels=8, hidden=8, seed=1), tr.X, tr.y,
               TrainConfig(lr=0.05, batch_size=16, epochs=15, seed=2))


@pytest.fixture(scope="session")
def baseline(small_ds, phi):
    return BaselineSet([s for s in small_ds.train if s.label == 0], phi, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_models(m=10, n=3, seed=0):
    return [cnn(m, n, channels=4, kernel=3, hidden=5, seed=seed), mlp(m, n, hidden=6, seed=seed + 1)]


# criterion number -> (passed, detail); filled by test_acceptance and printed at the end
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} | {detail}")
