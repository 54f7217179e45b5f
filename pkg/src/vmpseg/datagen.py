"""Synthetic shape segmentation corpus, the VMPD container and PGM export."""

import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .moments import make_rng

MAGIC = b"VMPD"


class DatasetFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class LabeledSample:
    image: np.ndarray  # (H, W, C_in) in [0, 1]
    mask: np.ndarray  # (H, W) uint8 labels
    n_classes: int

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim == 2:
            self.image = self.image[:, :, None]
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError("image and mask spatial shapes differ")
        if self.mask.size and self.mask.max() >= self.n_classes:
            raise ValueError(f"mask labels must be < {self.n_classes}")


@dataclass
class Dataset:
    samples: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self.samples[i])
        return self.samples[i]

    @property
    def n_classes(self):
        return self.samples[0].n_classes if self.samples else 0

    def arrays(self):
        """Stack into (N, H, W, C_in) images and (N, H, W) masks."""
        return (np.stack([s.image for s in self.samples]),
                np.stack([s.mask for s in self.samples]))


DEFAULT_BANDS = {
    2: [[0.05, 0.3], [0.6, 0.9]],
    3: [[0.05, 0.25], [0.45, 0.65], [0.8, 1.0]],
}


@dataclass
class ShapeTaskConfig:
    canvas: int = 64
    n_classes: int = 2
    shapes_per_image: int = 2
    count: int = 200
    intensity: list = None
    texture_sigma: float = 0.08
    radius_range: tuple = (5.0, 12.0)
    margin: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.intensity is None:
            self.intensity = DEFAULT_BANDS.get(self.n_classes)
        self.radius_range = tuple(float(r) for r in self.radius_range)

    def validate(self):
        if self.canvas < 32:
            raise ValueError("canvas must be at least 32 pixels")
        if self.n_classes not in (2, 3):
            raise ValueError("n_classes must be 2 or 3")
        if self.intensity is None or len(self.intensity) != self.n_classes:
            raise ValueError("need one intensity band per class")
        for lo, hi in self.intensity:
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError("intensity bands must lie within [0, 1]")
        if self.shapes_per_image < 0 or self.count < 0 or self.texture_sigma < 0:
            raise ValueError("counts and texture sigma must be nonnegative")
        r_lo, r_hi = self.radius_range
        if not 0 < r_lo <= r_hi or self.canvas - 2 * (self.margin + r_hi) <= 0:
            raise ValueError("radius range does not fit the canvas")
        return self

    def to_dict(self):
        d = asdict(self)
        d["radius_range"] = list(self.radius_range)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def expected_class_fraction(cfg):
    """Mean pixel fraction of each foreground class for one non-overlapping shape.

    Half ellipses (area pi a b) and half rectangles (area 4 a b), semi-axes
    a, b ~ U(r_lo, r_hi) independently, class uniform over 1..C-1.
    """
    r_lo, r_hi = cfg.radius_range
    ea = 0.5 * (r_lo + r_hi)
    area = ea * ea * (0.5 * np.pi + 2.0)
    return cfg.shapes_per_image * area / ((cfg.n_classes - 1) * cfg.canvas ** 2)


def _rasterize(kind, cx, cy, a, b, n):
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    dx, dy = (xx - cx) / a, (yy - cy) / b
    if kind == 0:
        return dx * dx + dy * dy <= 1.0
    return (np.abs(dx) <= 1.0) & (np.abs(dy) <= 1.0)


def generate_sample(cfg, rng):
    n = cfg.canvas
    bands = cfg.intensity
    img = np.full((n, n), rng.uniform(*bands[0]))
    mask = np.zeros((n, n), dtype=np.uint8)
    r_lo, r_hi = cfg.radius_range
    for _ in range(cfg.shapes_per_image):
        kind = int(rng.integers(2))
        cls = int(rng.integers(1, cfg.n_classes))
        a, b = rng.uniform(r_lo, r_hi, size=2)
        cx = rng.uniform(cfg.margin + a, n - cfg.margin - a)
        cy = rng.uniform(cfg.margin + b, n - cfg.margin - b)
        region = _rasterize(kind, cx, cy, a, b, n)
        img[region] = rng.uniform(*bands[cls])
        mask[region] = cls
    if cfg.texture_sigma > 0:
        img = np.clip(img + cfg.texture_sigma * rng.standard_normal((n, n)), 0.0, 1.0)
    # stored as float32 on disk; keep the in-memory copy identical
    img = img.astype(np.float32).astype(np.float64)
    return LabeledSample(img[:, :, None], mask, cfg.n_classes)


def generate(cfg):
    cfg.validate()
    rng = make_rng(cfg.seed)
    return Dataset([generate_sample(cfg, rng) for _ in range(cfg.count)])


def dumps_dataset(ds):
    parts = [MAGIC, struct.pack("<I", len(ds))]
    for s in ds.samples:
        h, w, c_in = s.image.shape
        parts.append(struct.pack("<4I", h, w, c_in, s.n_classes))
        parts.append(s.image.astype("<f4").tobytes())
        parts.append(s.mask.astype(np.uint8).tobytes())
    return b"".join(parts)


def save_dataset(ds, path):
    with open(path, "wb") as fh:
        fh.write(dumps_dataset(ds))


def loads_dataset(buf):
    def need(off, size, what):
        if off + size > len(buf):
            raise DatasetFormatError(f"truncated file while reading {what}", off)

    need(0, 8, "header")
    if buf[:4] != MAGIC:
        raise DatasetFormatError("bad magic, expected VMPD", 0)
    (count,) = struct.unpack_from("<I", buf, 4)
    off = 8
    samples = []
    for i in range(count):
        need(off, 16, f"sample {i} header")
        h, w, c_in, n_classes = struct.unpack_from("<4I", buf, off)
        off += 16
        n_img = h * w * c_in * 4
        need(off, n_img, f"sample {i} image")
        img = np.frombuffer(buf, dtype="<f4", count=h * w * c_in, offset=off)
        off += n_img
        need(off, h * w, f"sample {i} mask")
        mask = np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=off)
        if mask.size and mask.max() >= n_classes:
            raise DatasetFormatError(f"sample {i} has labels >= {n_classes}", off)
        off += h * w
        samples.append(LabeledSample(img.reshape(h, w, c_in).astype(np.float64),
                                     mask.reshape(h, w).copy(), n_classes))
    if off != len(buf):
        raise DatasetFormatError("trailing bytes after last sample", off)
    return Dataset(samples)


def load_dataset(path):
    with open(path, "rb") as fh:
        return loads_dataset(fh.read())


def quantize(values, normalization="fixed", vmax=None):
    """Map scalars to 0..255 with round-half-up.

    ``fixed`` maps [0, vmax] linearly; ``per-image`` uses the map's own max,
    and an all-zero map stays all zero.
    """
    v = np.asarray(values, dtype=np.float64)
    if normalization == "fixed":
        if vmax is None or not vmax > 0:
            raise ValueError("fixed normalization needs vmax > 0")
        scale = vmax
    elif normalization == "per-image":
        scale = float(v.max()) if v.size else 0.0
        if scale <= 0:
            return np.zeros(v.shape, dtype=np.uint8)
    else:
        raise ValueError("normalization must be 'fixed' or 'per-image'")
    q = np.floor(v / scale * 255.0 + 0.5)
    return np.clip(q, 0, 255).astype(np.uint8)


def export_pgm(values, path, normalization="fixed", vmax=None):
    """Write a 2-D map as a binary (P5) graymap with maxval 255."""
    v = np.asarray(values)
    if v.ndim != 2:
        raise ValueError("PGM export needs a 2-D map")
    q = quantize(v, normalization, vmax)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
