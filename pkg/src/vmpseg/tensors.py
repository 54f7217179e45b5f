"""Dense tensor substrate: patch extraction (im2col) and its adjoint.

Feature maps are numpy float64 arrays laid out as (H, W, C), or (N, H, W, C)
for batches. Patches are scanned row-major over output positions and each
patch is vectorized in (dy, dx, channel) order.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SENTINEL = -1


class GeometryError(ValueError):
    """Kernel/stride/padding geometry does not fit the input."""


class DataError(ValueError):
    """Input data is malformed (non-finite values, wrong dtype, ...)."""


def as_tensor(data, shape=None):
    """Return a float64 array, checking finiteness and optionally shape."""
    arr = np.asarray(data, dtype=np.float64)
    if shape is not None and arr.shape != tuple(shape):
        raise GeometryError(f"expected shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("tensor contains NaN or Inf")
    return arr


def normalize_pad(pad):
    """Accept an int or a (top, bottom, left, right) tuple."""
    if np.isscalar(pad):
        p = int(pad)
        pads = (p, p, p, p)
    else:
        pads = tuple(int(v) for v in pad)
        if len(pads) != 4:
            raise GeometryError("padding must be an int or (top, bottom, left, right)")
    if min(pads) < 0:
        raise GeometryError("padding must be nonnegative")
    return pads


def output_size(h, w, kernel, stride=1, pad=0):
    kh, kw = kernel
    t, b, l, r = normalize_pad(pad)
    if stride < 1:
        raise GeometryError("stride must be >= 1")
    hp, wp = h + t + b, w + l + r
    if kh > hp or kw > wp:
        raise GeometryError(f"kernel {kh}x{kw} exceeds padded input {hp}x{wp}")
    return (hp - kh) // stride + 1, (wp - kw) // stride + 1


@dataclass(frozen=True)
class PatchMatrix:
    """Patch rows of a source tensor plus the geometry that produced them.

    ``index[j, l]`` is the flat (row-major) index into the source tensor that
    feeds column ``l`` of row ``j``, or ``SENTINEL`` for a zero-padding slot.
    """

    data: np.ndarray
    index: np.ndarray
    src_shape: tuple
    out_hw: tuple

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    def gather(self, values):
        """Gather another tensor of the source's shape through the same geometry.

        Sentinel slots read as zero. Used to pull diagonal variances alongside
        the means.
        """
        flat = np.asarray(values, dtype=np.float64).reshape(-1)
        if flat.size != int(np.prod(self.src_shape)):
            raise GeometryError("gather source does not match patch geometry")
        ext = np.append(flat, 0.0)
        return ext[self.index]

    def scatter_add(self, rows):
        """Adjoint of :meth:`gather`: accumulate row values back onto the source."""
        rows = np.asarray(rows, dtype=np.float64)
        if rows.shape != self.index.shape:
            raise GeometryError("scatter rows do not match patch geometry")
        size = int(np.prod(self.src_shape))
        idx = np.where(self.index == SENTINEL, size, self.index).ravel()
        out = np.bincount(idx, weights=rows.ravel(), minlength=size + 1)
        return out[:size].reshape(self.src_shape)


def extract_patches(src, kernel, stride=1, zero_pad=0):
    """Build the patch matrix of an (H, W, C) tensor.

    Row ``j`` is the receptive field of output position ``j`` (row-major over
    the output grid); padding positions are marked in the index map.
    """
    src = np.asarray(src, dtype=np.float64)
    if src.ndim == 2:
        src = src[:, :, None]
    if src.ndim != 3:
        raise GeometryError(f"expected an (H, W, C) tensor, got shape {src.shape}")
    if not np.all(np.isfinite(src)):
        raise DataError("source tensor contains NaN or Inf")
    h, w, c = src.shape
    kh, kw = kernel
    t, _, l, _ = pads = normalize_pad(zero_pad)
    oh, ow = output_size(h, w, kernel, stride, pads)

    oy = np.arange(oh)[:, None, None, None, None] * stride - t
    ox = np.arange(ow)[None, :, None, None, None] * stride - l
    dy = np.arange(kh)[None, None, :, None, None]
    dx = np.arange(kw)[None, None, None, :, None]
    ch = np.arange(c)[None, None, None, None, :]
    yy = oy + dy
    xx = ox + dx
    inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
    flat = (yy * w + xx) * c + ch
    index = np.where(np.broadcast_to(inside, flat.shape), flat, SENTINEL)
    index = index.reshape(oh * ow, kh * kw * c)
    data = np.append(src.ravel(), 0.0)[index]
    return PatchMatrix(data=data, index=index, src_shape=src.shape, out_hw=(oh, ow))


def matvec(a, v):
    """Patch-matrix times kernel vector; sentinel slots contribute zero."""
    data = a.data if isinstance(a, PatchMatrix) else np.asarray(a, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != data.shape[1]:
        raise GeometryError(f"vector length {v.shape} does not match {data.shape[1]} columns")
    return data @ v


# Batched fast path used by the network. Same layout as extract_patches.

def im2col(x, kernel, pad=0):
    """(N, H, W, C) -> (N*Ho*Wo, kh*kw*C) with stride 1."""
    kh, kw = kernel
    t, b, l, r = normalize_pad(pad)
    n, h, w, c = x.shape
    oh, ow = output_size(h, w, kernel, 1, (t, b, l, r))
    if t or b or l or r:
        x = np.pad(x, ((0, 0), (t, b), (l, r), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))  # N, Ho, Wo, C, kh, kw
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c)
    return cols, (oh, ow)


def col2im(cols, x_shape, kernel, pad=0):
    """Adjoint of :func:`im2col`: scatter-add patch gradients onto the input."""
    kh, kw = kernel
    t, b, l, r = normalize_pad(pad)
    n, h, w, c = x_shape
    oh, ow = output_size(h, w, kernel, 1, (t, b, l, r))
    cols = cols.reshape(n, oh, ow, kh, kw, c)
    out = np.zeros((n, h + t + b, w + l + r, c))
    for dy in range(kh):
        for dx in range(kw):
            out[:, dy:dy + oh, dx:dx + ow, :] += cols[:, :, :, dy, dx, :]
    return out[:, t:t + h, l:l + w, :]
