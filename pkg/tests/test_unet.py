import time

import numpy as np
import pytest

from conftest import toy_model
from vmpseg.checkpoint import dumps_model
from vmpseg.tensors import DataError, GeometryError
from vmpseg.unet import (
    ConfigError,
    NetworkConfig,
    NonFiniteError,
    build,
    deterministic_forward,
    forward,
    forward_batch,
    plan_geometry,
)


def test_three_block_layout_matches_hand_enumeration():
    cfg = NetworkConfig(input_shape=(68, 68, 1), n_classes=2, encoder=[16, 32, 64],
                        decoder=[32, 16])
    model = build(cfg, seed=0)
    kinds = [op[0] for op in model.ops]
    block = ["conv", "relu", "conv", "relu"]
    dec = ["upconv", "pad", "concat", "conv", "relu", "pad", "conv", "relu"]
    assert kinds == (block + ["skip", "pool"]) * 2 + block + dec * 2 + ["conv", "softmax"]
    shapes = [(p.name, p.kh, p.kw, p.cin, p.kout) for p in model.params]
    assert shapes == [
        ("enc0.conv1", 3, 3, 1, 16), ("enc0.conv2", 3, 3, 16, 16),
        ("enc1.conv1", 3, 3, 16, 32), ("enc1.conv2", 3, 3, 32, 32),
        ("enc2.conv1", 3, 3, 32, 64), ("enc2.conv2", 3, 3, 64, 64),
        ("dec0.upconv", 2, 2, 64, 32), ("dec0.conv1", 3, 3, 64, 32), ("dec0.conv2", 3, 3, 32, 32),
        ("dec1.upconv", 2, 2, 32, 16), ("dec1.conv1", 3, 3, 32, 16), ("dec1.conv2", 3, 3, 16, 16),
        ("head", 1, 1, 16, 2),
    ]
    for p in model.params:
        np.testing.assert_allclose(p.var, 1e-4, rtol=1e-12)


@pytest.mark.parametrize("kwargs", [
    {"encoder": [16], "decoder": []},
    {"encoder": [16, 32], "decoder": [16, 8]},
    {"encoder": [16, 0], "decoder": [16]},
    {"n_classes": 1},
    {"kernel_size": 2},
    {"sigma_pa": 0.0},
    {"mode": "mc"},
    {"input_shape": (10, 10, 1)},
])
def test_invalid_configs_rejected(kwargs):
    with pytest.raises(ConfigError):
        build(NetworkConfig(**kwargs))


def test_same_seed_same_initial_checkpoint():
    cfg = NetworkConfig(input_shape=(32, 32, 1))
    assert dumps_model(build(cfg, seed=3)) == dumps_model(build(cfg, seed=3))
    assert dumps_model(build(cfg, seed=3)) != dumps_model(build(cfg, seed=4))


@pytest.mark.parametrize("size", [16, 20, 32, 44, 64])
def test_output_shape_equals_input_shape(size):
    model = build(NetworkConfig(input_shape=(size, size, 2), n_classes=3, encoder=[2, 3],
                                decoder=[2]), seed=1)
    out = forward(model, np.random.default_rng(size).uniform(size=(size, size, 2)))
    assert out.prob_mean.shape == (size, size, 3)
    assert out.uncertainty.shape == (size, size, 3)
    assert out.class_map.shape == (size, size)


def test_rectangular_input_shape():
    model = build(NetworkConfig(input_shape=(20, 32, 1), encoder=[2, 3], decoder=[2]), seed=0)
    assert forward(model, np.zeros((20, 32, 1))).prob_mean.shape == (20, 32, 2)
    assert plan_geometry(model.config)["skips"] == [(16, 28), (4, 10)]


def test_zero_image_gives_spatially_constant_output():
    out = forward(toy_model(), np.zeros((16, 16, 1)))
    for arr in (out.prob_mean, out.uncertainty):
        assert np.all(np.ptp(arr, axis=(0, 1)) == 0.0)


def test_output_contracts_on_random_models():
    for seed in range(5):
        model = toy_model(seed=seed)
        x = np.random.default_rng(seed).uniform(size=(3, 16, 16, 1))
        p, u = forward_batch(model, x)
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
        assert np.all(u >= 0)
        out = forward(model, x[0])
        np.testing.assert_array_equal(out.class_map, np.argmax(out.prob_mean, -1))


def test_zero_variance_mode_matches_deterministic_forward():
    model = toy_model()
    x = np.random.default_rng(0).uniform(size=(4, 16, 16, 1))
    p, u = forward_batch(model, x, zero_variance=True)
    np.testing.assert_allclose(p, deterministic_forward(model, x), rtol=0, atol=1e-12)
    assert np.all(np.abs(u) <= 1e-12)


def test_single_traversal_per_forward():
    model = toy_model()
    x = np.zeros((16, 16, 1))
    before = model.traversals
    forward(model, x)
    assert model.traversals == before + 1
    deterministic_forward(model, x)
    assert model.traversals == before + 2


def test_input_errors():
    model = toy_model()
    with pytest.raises(GeometryError):
        forward(model, np.zeros((15, 16, 1)))
    bad = np.zeros((16, 16, 1))
    bad[3, 3, 0] = np.nan
    with pytest.raises(DataError):
        forward(model, bad)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_intermediate_reports_layer():
    model = toy_model()
    model.params[0].mean[:] = 1e200
    with pytest.raises(NonFiniteError) as err:
        forward(model, np.ones((16, 16, 1)))
    assert 0 <= err.value.layer < len(model.ops)


def test_deterministic_pass_not_slower_than_vmp():
    model = build(NetworkConfig(), seed=0)
    x = np.random.default_rng(0).uniform(size=(8, 64, 64, 1))

    def best(fn):
        times = []
        for _ in range(5):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times)

    forward_batch(model, x)
    t_vmp = best(lambda: forward_batch(model, x))
    t_det = best(lambda: deterministic_forward(model, x))
    assert t_det <= t_vmp
