import json
import struct

import numpy as np
import pytest

from conftest import toy_model
from vmpseg.checkpoint import CheckpointError, dumps_model, load_model, loads_model, save_model
from vmpseg.unet import NetworkConfig, build, forward


def test_round_trip_is_exact(tmp_path):
    model = toy_model(seed=4)
    path = tmp_path / "m.vmp"
    save_model(model, path, extra={"epoch": 3})
    back = load_model(path)
    assert dumps_model(back, extra={"epoch": 3}) == path.read_bytes()
    for a, b in zip(model.params, back.params):
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.rho, b.rho)
    x = np.random.default_rng(0).uniform(size=(16, 16, 1))
    np.testing.assert_array_equal(forward(model, x).uncertainty, forward(back, x).uncertainty)


def test_layout_kernel_by_kernel():
    model = toy_model()
    buf = dumps_model(model)
    assert buf[:4] == b"VMP1"
    (n,) = struct.unpack_from("<I", buf, 4)
    header = json.loads(buf[8:8 + n])
    assert header["network"]["encoder"] == [3, 4]
    p = model.params[0]
    first = np.frombuffer(buf, "<f8", p.length, 8 + n)
    second = np.frombuffer(buf, "<f8", p.rho.shape[0], 8 + n + 8 * p.length)
    np.testing.assert_array_equal(first, p.mean[:, 0])
    np.testing.assert_array_equal(second, p.rho[:, 0])
    total = sum(p.mean.size + p.rho.size for p in model.params)
    assert len(buf) == 8 + n + 8 * total


def test_corrupt_checkpoints_rejected():
    buf = dumps_model(toy_model())
    (n,) = struct.unpack_from("<I", buf, 4)
    with pytest.raises(CheckpointError):
        loads_model(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointError):
        loads_model(buf[:20])
    with pytest.raises(CheckpointError, match="truncated kernel"):
        loads_model(buf[:-8])
    with pytest.raises(CheckpointError, match="trailing"):
        loads_model(buf + b"\0" * 8)
    header = json.loads(buf[8:8 + n])
    header["layers"][0]["kout"] += 1
    head = json.dumps(header).encode()
    with pytest.raises(CheckpointError, match="layer table"):
        loads_model(b"VMP1" + struct.pack("<I", len(head)) + head + buf[8 + n:])


@pytest.mark.parametrize("variance", ["per_kernel", "per_element"])
def test_roundtrip_both_variance_layouts(variance):
    cfg = NetworkConfig(input_shape=(16, 16, 1), n_classes=2, encoder=[2, 3], decoder=[2],
                        kernel_variance=variance)
    model = build(cfg, seed=0)
    rng = np.random.default_rng(1)
    for p in model.params:
        p.rho[:] = rng.normal(size=p.rho.shape)
    back, _ = loads_model(dumps_model(model))
    assert back.config.kernel_variance == variance
    for a, b in zip(model.params, back.params):
        assert b.rho.shape == (1 if variance == "per_kernel" else a.length, a.kout)
        np.testing.assert_array_equal(a.rho, b.rho)
