import time

import numpy as np
import pytest

from vmpseg.datagen import ShapeTaskConfig, generate
from vmpseg.moments import inverse_softplus, make_rng
from vmpseg.training import TrainConfig, train
from vmpseg.unet import NetworkConfig, build

TRAIN_SEED, TEST_SEED = 1, 2


def toy_model(mode="vmp", seed=0, n_classes=3, size=16, kernel_variance="per_kernel"):
    """Two-encoder-block net with variances spread over [1e-3, 5e-2]."""
    cfg = NetworkConfig(input_shape=(size, size, 1), n_classes=n_classes, encoder=[3, 4],
                        decoder=[3], mode=mode, kernel_variance=kernel_variance)
    model = build(cfg, seed=seed)
    rng = make_rng((seed, 1))
    for p in model.params:
        p.rho[:] = inverse_softplus(rng.uniform(1e-3, 5e-2, p.rho.shape))
    return model


def shape_config(count, seed, canvas=64, n_classes=2):
    small = {} if canvas >= 64 else {"radius_range": (3.0, 6.0), "margin": 3}
    return ShapeTaskConfig(count=count, canvas=canvas, n_classes=n_classes, seed=seed, **small)


def _train(mode, n_classes=2, canvas=64, count=200, epochs=30):
    data = generate(shape_config(count, TRAIN_SEED, canvas, n_classes))
    model = build(NetworkConfig(input_shape=(canvas, canvas, 1), n_classes=n_classes,
                                mode=mode), seed=0)
    t0 = time.perf_counter()
    model, history = train(model, data, TrainConfig(epochs=epochs, seed=0))
    return model, history, time.perf_counter() - t0


@pytest.fixture(scope="session")
def test_set():
    return generate(ShapeTaskConfig(count=50, seed=TEST_SEED))


@pytest.fixture(scope="session")
def vmp_run():
    """Desk-scale reference run: [16,32]/[16], 64x64, 2 classes, 30 epochs, 200 images."""
    return _train("vmp")


@pytest.fixture(scope="session")
def det_run():
    """Deterministic-mode model with the same data, architecture and budget."""
    return _train("deterministic")


@pytest.fixture(scope="session")
def three_class_run():
    return _train("vmp", n_classes=3, canvas=32, count=120, epochs=30)


@pytest.fixture(scope="session")
def three_class_test():
    return generate(shape_config(20, TEST_SEED, 32, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record one verdict line per acceptance criterion, then assert it."""
    def record(cid, ok, detail):
        ACCEPTANCE[cid] = (bool(ok), detail)
        print(f"{cid} {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"{cid}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid:<4} {'PASS' if ok else 'FAIL'}  {detail}")
