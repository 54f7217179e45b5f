"""VMP1 model checkpoints.

Layout: b"VMP1", u32 little-endian header length, UTF-8 JSON header, then for
every kernel in declaration order its mean vector followed by its rho vector
as little-endian float64. The rho vector has one entry when the kernel shares
a single variance, otherwise one per element.
"""

import json
import struct

import numpy as np

from .unet import NetworkConfig, build

MAGIC = b"VMP1"


class CheckpointError(ValueError):
    pass


def dumps_model(model, extra=None):
    header = {
        "network": model.config.to_dict(),
        "layers": [{"name": p.name, "kh": p.kh, "kw": p.kw, "cin": p.cin, "kout": p.kout,
                    "rho_len": p.rho.shape[0]} for p in model.params],
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = []
    for p in model.params:
        for k in range(p.kout):
            body.append(np.ascontiguousarray(p.mean[:, k]).astype("<f8").tobytes())
            body.append(np.ascontiguousarray(p.rho[:, k]).astype("<f8").tobytes())
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(body)


def save_model(model, path, extra=None):
    with open(path, "wb") as fh:
        fh.write(dumps_model(model, extra))


def loads_model(buf):
    """Rebuild a model from checkpoint bytes; returns (model, header)."""
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise CheckpointError("bad magic, expected VMP1")
    (n,) = struct.unpack_from("<I", buf, 4)
    if 8 + n > len(buf):
        raise CheckpointError("truncated header")
    header = json.loads(buf[8:8 + n].decode("utf-8"))
    model = build(NetworkConfig.from_dict(header["network"]), seed=0)
    keys = ("name", "kh", "kw", "cin", "kout", "rho_len")
    if [(p.name, p.kh, p.kw, p.cin, p.kout, p.rho.shape[0]) for p in model.params] != \
            [tuple(d.get(k) for k in keys) for d in header["layers"]]:
        raise CheckpointError("layer table does not match the network config")
    off = 8 + n
    for p in model.params:
        n_rho = p.rho.shape[0]
        step = 8 * (p.length + n_rho)
        for k in range(p.kout):
            if off + step > len(buf):
                raise CheckpointError(f"truncated kernel data at byte {off}")
            p.mean[:, k] = np.frombuffer(buf, "<f8", p.length, off)
            p.rho[:, k] = np.frombuffer(buf, "<f8", n_rho, off + 8 * p.length)
            off += step
    if off != len(buf):
        raise CheckpointError("trailing bytes after kernel data")
    return model, header


def load_model(path):
    with open(path, "rb") as fh:
        return loads_model(fh.read())[0]
