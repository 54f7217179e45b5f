"""VMP U-Net: architecture planning, parameters and the single-pass forward.

Encoder convolutions are unpadded, so each block shrinks the map. Each
decoder block pads twice with ``sigma_pa`` variance (before the concatenation
and before its second convolution) with widths chosen so that the final map
is back at the input resolution.
"""

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from .moments import VariationalKernel, inverse_softplus, make_rng, softplus
from .tensors import DataError, GeometryError

INIT_VARIANCE = 1e-4
MODES = ("vmp", "deterministic")
KERNEL_VARIANCE = ("per_kernel", "per_element")


class ConfigError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, layer, op):
        super().__init__(f"non-finite values after layer {layer} ({op})")
        self.layer = layer
        self.op = op


class StaleTapeError(RuntimeError):
    pass


@dataclass
class NetworkConfig:
    input_shape: tuple = (64, 64, 1)
    n_classes: int = 2
    encoder: list = field(default_factory=lambda: [16, 32])
    decoder: list = field(default_factory=lambda: [16])
    kernel_size: int = 3
    sigma_pa: float = 0.05
    mode: str = "vmp"
    kernel_variance: str = "per_kernel"

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.encoder = [int(v) for v in self.encoder]
        self.decoder = [int(v) for v in self.decoder]

    def validate(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError("input_shape must be (H, W, C_in) with positive extents")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        if len(self.encoder) < 2:
            raise ConfigError("need at least two encoder blocks (one decoder block)")
        if len(self.decoder) != len(self.encoder) - 1:
            raise ConfigError("decoder depth must equal encoder depth - 1")
        if min(self.encoder + self.decoder) < 1:
            raise ConfigError("kernel counts must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be a positive odd integer")
        if not self.sigma_pa > 0:
            raise ConfigError("sigma_pa must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.kernel_variance not in KERNEL_VARIANCE:
            raise ConfigError(f"kernel_variance must be one of {KERNEL_VARIANCE}")
        plan_geometry(self)
        return self

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def _plan_axis(size, depth, k):
    """Spatial bookkeeping along one axis. Returns (skip sizes, pads, crops)."""
    shrink = k - 1
    skips = []
    n = size
    for b in range(depth):
        n = n - 2 * shrink
        if n < 1:
            raise ConfigError(f"input too small: encoder block {b} collapses to {n}")
        skips.append(n)
        if b < depth - 1:
            if n % 2:
                raise ConfigError(f"max-pool input of block {b} has odd size {n}")
            n //= 2
    pads = []
    for b in range(depth - 2, -1, -1):
        target = skips[b] if b > 0 else size
        up = 2 * n
        total2 = target - up + 2 * shrink
        if total2 < 0 or total2 % 2:
            raise ConfigError(f"decoder block for level {b} cannot reach size {target}")
        total = total2 // 2
        if skips[b] < up:
            raise ConfigError(f"skip at level {b} smaller than up-sampled map")
        w1 = min(total, (skips[b] - up) // 2)
        pads.append((w1, total - w1, up + 2 * w1))
        n = target
    return skips, pads


def plan_geometry(cfg):
    h, w, _ = cfg.input_shape
    depth = len(cfg.encoder)
    sh, ph = _plan_axis(h, depth, cfg.kernel_size)
    sw, pw = _plan_axis(w, depth, cfg.kernel_size)
    if [p[:2] for p in ph] != [p[:2] for p in pw]:
        raise ConfigError("height and width require different decoder padding")
    return {
        "skips": list(zip(sh, sw)),
        "pads": [(a[0], a[1]) for a in ph],
        "crops": [(a[2], b[2]) for a, b in zip(ph, pw)],
    }


@dataclass
class ConvParam:
    name: str
    kh: int
    kw: int
    cin: int
    kout: int
    mean: np.ndarray
    rho: np.ndarray

    @property
    def length(self):
        return self.kh * self.kw * self.cin

    @property
    def var(self):
        """Per-element variances; a shared rho row is broadcast over the kernel."""
        return np.ascontiguousarray(np.broadcast_to(softplus(self.rho), self.mean.shape))

    def kernel(self, k):
        rho = np.broadcast_to(self.rho[:, k], self.mean[:, k].shape)
        return VariationalKernel(self.mean[:, k], rho, self.kh, self.kw, self.cin)


@dataclass
class VariationalModel:
    """Configuration, ordered op list and kernel banks of a VMP U-Net."""

    config: NetworkConfig
    ops: list
    params: list
    version: int = 0
    traversals: int = 0

    def kernels(self):
        """All kernels in declaration order (layer by layer, kernel by kernel)."""
        return [p.kernel(k) for p in self.params for k in range(p.kout)]

    def n_parameters(self):
        return sum(p.mean.size + p.rho.size for p in self.params)

    def touch(self):
        self.version += 1

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class SegmentationOutput:
    prob_mean: np.ndarray
    uncertainty: np.ndarray
    class_map: np.ndarray


@dataclass
class LayerTape:
    """Per-call forward state consumed by the adjoints."""

    model_version: int
    entries: list
    x_shape: tuple


def build(cfg, seed=0):
    """Lay out the op list and initialize kernels (He-style means, var 1e-4).

    With ``kernel_variance="per_kernel"`` each kernel has a single variance
    shared by all of its elements (rho has one row); "per_element" gives every
    weight its own variance.
    """
    cfg.validate()
    geo = plan_geometry(cfg)
    rng = make_rng(seed)
    k = cfg.kernel_size
    ops, params = [], []

    def conv(name, kh, kw, cin, kout, fan_in):
        length = kh * kw * cin
        mean = rng.standard_normal((length, kout)) * np.sqrt(2.0 / fan_in)
        rows = 1 if cfg.kernel_variance == "per_kernel" else length
        rho = np.full((rows, kout), float(inverse_softplus(INIT_VARIANCE)))
        params.append(ConvParam(name, kh, kw, cin, kout, mean, rho))
        return len(params) - 1

    cin = cfg.input_shape[2]
    depth = len(cfg.encoder)
    for b, kout in enumerate(cfg.encoder):
        ops.append(("conv", conv(f"enc{b}.conv1", k, k, cin, kout, k * k * cin), 0))
        ops.append(("relu",))
        ops.append(("conv", conv(f"enc{b}.conv2", k, k, kout, kout, k * k * kout), 0))
        ops.append(("relu",))
        cin = kout
        if b < depth - 1:
            ops.append(("skip", b))
            ops.append(("pool",))
    for i, kout in enumerate(cfg.decoder):
        level = depth - 2 - i
        w1, w2 = geo["pads"][i]
        ops.append(("upconv", conv(f"dec{i}.upconv", 2, 2, cin, kout, cin)))
        ops.append(("pad", w1))
        ops.append(("concat", level))
        cat = kout + cfg.encoder[level]
        ops.append(("conv", conv(f"dec{i}.conv1", k, k, cat, kout, k * k * cat), 0))
        ops.append(("relu",))
        ops.append(("pad", w2))
        ops.append(("conv", conv(f"dec{i}.conv2", k, k, kout, kout, k * k * kout), 0))
        ops.append(("relu",))
        cin = kout
    ops.append(("conv", conv("head", 1, 1, cin, cfg.n_classes, cin), 0))
    ops.append(("softmax",))
    return VariationalModel(cfg, ops, params)


def _check_input(model, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != model.config.input_shape:
        raise GeometryError(
            f"input shape {x.shape[1:] if x.ndim == 4 else x.shape} "
            f"does not match {model.config.input_shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("input image contains NaN or Inf")
    return x, single


def run(model, x, track_var=True, keep_tape=False, zero_variance=False):
    """Single traversal of the op list on a batch (N, H, W, C_in).

    Returns (prob_mean, uncertainty, logits mean, tape). With ``track_var``
    off only means are propagated and the uncertainty is None.
    """
    model.traversals += 1
    cfg = model.config
    sigma_pa = 0.0 if zero_variance else cfg.sigma_pa
    mu, s = x, None
    skips = {}
    entries = [] if keep_tape else None
    logits = None
    for li, op in enumerate(model.ops):
        kind = op[0]
        if kind == "conv":
            p = model.params[op[1]]
            v = None
            if track_var:
                v = np.zeros_like(p.mean) if zero_variance else p.var
            if keep_tape:
                new_mu, new_s, patches = L.conv_fwd(mu, s, p.mean, v, (p.kh, p.kw), op[2],
                                                    keep=True)
                entries.append((mu, s, v, patches))
                mu, s = new_mu, new_s
            else:
                mu, s = L.conv_fwd(mu, s, p.mean, v, (p.kh, p.kw), op[2])
        elif kind == "relu":
            mu, s, on = L.relu_fwd(mu, s)
            if keep_tape:
                entries.append(on)
        elif kind == "skip":
            skips[op[1]] = (mu, s)
            if keep_tape:
                entries.append(None)
        elif kind == "pool":
            shape = mu.shape
            mu, s, idx = L.maxpool_fwd(mu, s)
            if keep_tape:
                entries.append((idx, shape))
        elif kind == "upconv":
            p = model.params[op[1]]
            v = None
            if track_var:
                v = np.zeros_like(p.mean) if zero_variance else p.var
            mu, s, (up_mu, up_s, patches) = L.upconv_fwd(mu, s, p.mean, v, keep=keep_tape)
            if keep_tape:
                entries.append((up_mu, up_s, v, patches))
        elif kind == "pad":
            mu, s = L.pad_fwd(mu, s, op[1], sigma_pa)
            if keep_tape:
                entries.append(None)
        elif kind == "concat":
            e_mu, e_s = skips[op[1]]
            src_shape = e_mu.shape
            c_mu, c_s = L.crop_fwd(e_mu, e_s, mu.shape[1:3])
            n_dec = mu.shape[3]
            mu = np.concatenate([mu, c_mu], axis=-1)
            if s is not None:
                s = np.concatenate([s, c_s], axis=-1)
            if keep_tape:
                entries.append((n_dec, src_shape))
        elif kind == "softmax":
            logits = mu
            s_in = s
            mu, s = L.softmax_diag_fwd(mu, s)
            if keep_tape:
                entries.append((mu, s_in))
        else:  # pragma: no cover
            raise ValueError(f"unknown op {kind}")
        if not np.all(np.isfinite(mu)) or (s is not None and not np.all(np.isfinite(s))):
            raise NonFiniteError(li, kind)
    tape = LayerTape(model.version, entries, x.shape) if keep_tape else None
    return mu, s, logits, tape


def forward_batch(model, x, training=False, zero_variance=False):
    """Forward a batch; returns prob_mean and uncertainty arrays (and the tape)."""
    x, _ = _check_input(model, x)
    track = model.config.mode == "vmp" or zero_variance
    p, u, _, tape = run(model, x, track_var=track, keep_tape=training,
                        zero_variance=zero_variance)
    if u is None:
        u = np.zeros_like(p)
    return (p, u, tape) if training else (p, u)


def forward(model, image, training=False, zero_variance=False):
    """One pass, no sampling: segmentation map plus per-class uncertainty map."""
    x, single = _check_input(model, image)
    res = forward_batch(model, x, training, zero_variance)
    p, u = res[0], res[1]
    if single:
        p, u = p[0], u[0]
    out = SegmentationOutput(p, u, np.argmax(p, axis=-1))
    return (out, res[2]) if training else out


def deterministic_forward(model, image):
    """Mean-only pass (all variances treated as zero); returns class probabilities."""
    x, single = _check_input(model, image)
    p, _, _, _ = run(model, x, track_var=False)
    return p[0] if single else p


def predict(model, images, batch_size=16):
    """Batched inference returning (prob_mean, uncertainty) for many images."""
    images = np.asarray(images, dtype=np.float64)
    ps, us = [], []
    for i in range(0, len(images), batch_size):
        p, u = forward_batch(model, images[i:i + batch_size])
        ps.append(p)
        us.append(u)
    return np.concatenate(ps), np.concatenate(us)
