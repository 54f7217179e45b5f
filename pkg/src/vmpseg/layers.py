"""Moment propagation through encoder/decoder operations.

Every operation maps (mean, diagonal variance) to (mean, diagonal variance).
Convolutions are exact for independent Gaussian inputs and weights; ReLU and
softmax use a first-order Taylor expansion around the mean.

The module has two layers of API. The public ops (``conv_first``,
``relu_moments``, ...) take and return :class:`RandomTensor` values for single
feature maps. The ``*_fwd`` / ``*_bwd`` pairs work on raw batched arrays of
shape (N, H, W, C) and are what the network and its adjoints run on.
"""

import numpy as np

from .moments import RandomTensor, VariationalKernel, kernel_variance
from .tensors import (
    DataError,
    GeometryError,
    PatchMatrix,
    extract_patches,
    im2col,
    normalize_pad,
)

UPCONV_KERNEL = (2, 2)
UPCONV_PAD = (1, 0, 1, 0)


def _kernel_arrays(k):
    """Return (mean (L, K), var (L, K), single) for a kernel or kernel bank."""
    if isinstance(k, VariationalKernel):
        return k.mean[:, None], kernel_variance(k)[:, None], True
    if isinstance(k, (list, tuple)) and k and isinstance(k[0], VariationalKernel):
        m = np.stack([kk.mean for kk in k], axis=1)
        v = np.stack([kernel_variance(kk) for kk in k], axis=1)
        return m, v, False
    m, v = (np.asarray(a, dtype=np.float64) for a in k)
    if m.shape != v.shape:
        raise GeometryError("kernel mean and variance shapes differ")
    if m.ndim == 1:
        return m[:, None], v[:, None], True
    return m, v, False


def _rows(x):
    return x.data if isinstance(x, PatchMatrix) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------- public ops

def conv_first(x, k):
    """Convolution of a deterministic input with a Gaussian kernel.

    mean_j = <x_j, m>,  var_j = sum_l x_jl^2 var_l
    """
    rows = _rows(x)
    m, v, single = _kernel_arrays(k)
    if rows.shape[1] != m.shape[0]:
        raise GeometryError(f"patch width {rows.shape[1]} != kernel length {m.shape[0]}")
    mean = rows @ m
    var = (rows * rows) @ v
    if single:
        mean, var = mean[:, 0], var[:, 0]
    return RandomTensor(mean, var)


def conv_random(b, k):
    """Convolution where both the patch rows and the kernel are random.

    ``b`` holds per-row means and variances (a RandomTensor of shape (J, L),
    e.g. from :func:`random_patches`). Independence of input and kernel gives

        var_j = sum_l s_jl var_l + sum_l mu_jl^2 var_l + sum_l m_l^2 s_jl
    """
    mu, s = b.mean, b.var
    if np.any(s < 0):
        raise DataError("input variance must be nonnegative")
    m, v, single = _kernel_arrays(k)
    if mu.shape[1] != m.shape[0]:
        raise GeometryError(f"patch width {mu.shape[1]} != kernel length {m.shape[0]}")
    mean = mu @ m
    var = s @ (v + m * m) + (mu * mu) @ v
    if single:
        mean, var = mean[:, 0], var[:, 0]
    return RandomTensor(mean, var)


def random_patches(g, kernel, zero_pad=0):
    """Patch rows of a random (H, W, C) map; padding slots get mean 0, var 0."""
    pm = extract_patches(g.mean, kernel, 1, zero_pad)
    return RandomTensor(pm.data, pm.gather(g.var)), pm


def conv_moments(g, k, kernel_hw, zero_pad=0):
    """Full convolution of an (H, W, C) random map with a kernel bank."""
    b, pm = random_patches(g, kernel_hw, zero_pad)
    out = conv_random(b, k)
    oh, ow = pm.out_hw
    return RandomTensor(out.mean.reshape(oh, ow, -1), out.var.reshape(oh, ow, -1))


def relu_moments(z):
    """First-order Taylor ReLU; the derivative at exactly 0 is taken as 0."""
    on = z.mean > 0
    return RandomTensor(np.where(on, z.mean, 0.0), np.where(on, z.var, 0.0))


def maxpool_moments(g, return_indices=False):
    """2x2/stride-2 pooling of the mean; variances follow the mean's argmax.

    Ties go to the first position in row-major window order.
    """
    mean, var, idx = maxpool_fwd(g.mean[None], g.var[None])
    out = RandomTensor(mean[0], var[0])
    return (out, idx[0]) if return_indices else out


def upsample_moments(g):
    """Insert zeros after every element along H and W (factor 2)."""
    return RandomTensor(upsample_fwd(g.mean[None])[0], upsample_fwd(g.var[None])[0])


def upconv_moments(g, k):
    """Up-sample then apply a 2x2 random convolution; output is (2H, 2W, K)."""
    up = upsample_moments(g)
    return conv_moments(up, k, UPCONV_KERNEL, UPCONV_PAD)


def pad_moments(g, w, sigma_pa):
    """Zero-pad the mean by ``w`` on every side; padded variances are sigma_pa."""
    if not sigma_pa > 0:
        raise ValueError("sigma_pa must be positive")
    mean, var = pad_fwd(g.mean[None], g.var[None], w, sigma_pa)
    return RandomTensor(mean[0], var[0])


def crop_to(g, target_hw):
    """Center crop (floor offsets) of mean and variance to ``target_hw``."""
    h, w = g.mean.shape[:2]
    th, tw = target_hw
    if th > h or tw > w:
        raise GeometryError(f"cannot crop {h}x{w} to larger {th}x{tw}")
    mean, var = crop_fwd(g.mean[None], g.var[None], (th, tw))
    return RandomTensor(mean[0], var[0])


def concat_moments(dec, enc):
    """Channel concatenation, decoder channels first."""
    if dec.mean.shape[:-1] != enc.mean.shape[:-1]:
        raise GeometryError(
            f"spatial shapes differ: {dec.mean.shape[:-1]} vs {enc.mean.shape[:-1]}")
    return RandomTensor(np.concatenate([dec.mean, enc.mean], axis=-1),
                        np.concatenate([dec.var, enc.var], axis=-1))


def softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_moments(f):
    """Taylor moments of softmax over the last axis.

    Returns ``(prob, cov)`` where ``cov[..., i, j]`` is J diag(s) J^T with
    J_ij = p_i (delta_ij - p_j).
    """
    if f.mean.shape[-1] < 2:
        raise GeometryError("softmax needs at least two classes")
    p = softmax(f.mean)
    jac = p[..., :, None] * (np.eye(p.shape[-1]) - p[..., None, :])
    cov = np.einsum("...ik,...k,...jk->...ij", jac, f.var, jac)
    return p, cov


# ------------------------------------------------------ batched fwd / bwd

def conv_patches(mu, s, ksize, pad=0, with_var=True):
    """Patch matrices (mu, s, s + mu^2) shared by the forward and its adjoint."""
    pm, out_hw = im2col(mu, ksize, pad)
    if not with_var:
        return (pm, None, None), out_hw
    pa = pm * pm
    if s is None:
        return (pm, None, pa), out_hw
    ps = im2col(s, ksize, pad)[0]
    pa += ps
    return (pm, ps, pa), out_hw


def conv_fwd(mu, s, m, v, ksize, pad=0, keep=False):
    """Batched convolution moments.

    ``s=None`` marks a deterministic input; ``v=None`` skips the variance
    channel entirely (mean-only mode). Uses
    var = im2col(s) @ m^2 + im2col(s + mu^2) @ v.
    With ``keep`` the patch matrices are returned for the adjoint.
    """
    (pm, ps, pa), (oh, ow) = conv_patches(mu, s, ksize, pad, v is not None)
    n = mu.shape[0]
    k = m.shape[1]
    mean = (pm @ m).reshape(n, oh, ow, k)
    var = None
    if v is not None:
        var = pa @ v
        if ps is not None:
            var += ps @ (m * m)
        var = var.reshape(n, oh, ow, k)
    if keep:
        return mean, var, (pm, ps, pa)
    return mean, var


def conv_transpose(g, w, in_hw, ksize, pad=0):
    """Adjoint of the patch matmul: sum over taps of g @ w^T, scattered to the input.

    Computed as a correlation of the padded gradient map with the spatially
    flipped kernel, which avoids materializing patch-space gradients.
    """
    kh, kw = ksize
    t, _, l, _ = normalize_pad(pad)
    n, oh, ow, k = g.shape
    h, wd = in_hw
    c = w.shape[0] // (kh * kw)
    top, left = kh - 1 - t, kw - 1 - l
    bottom, right = h + kh - 1 - oh - top, wd + kw - 1 - ow - left
    cols, _ = im2col(g, ksize, (top, bottom, left, right))
    wf = w.reshape(kh, kw, c, -1)[::-1, ::-1].reshape(kh, kw, c, k, -1)
    wf = wf.transpose(0, 1, 3, 2, 4).reshape(kh * kw * k, -1)
    return (cols @ wf).reshape(n, h, wd, -1)


def _patch_grad(cols, g):
    """cols^T @ g, evaluated as (g^T @ cols)^T which BLAS streams faster."""
    return (g.T @ cols).T


def _stack_kernels(*ws):
    """Stack kernel banks (L, K) along a trailing axis for one transposed conv."""
    return np.stack(ws, axis=-1).reshape(ws[0].shape[0], -1)


def conv_bwd(gm, gv, mu, s, m, v, ksize, pad=0, need_input=True, patches=None):
    """Adjoint of :func:`conv_fwd`.

    Returns (d_mean_kernel, d_var_kernel, d_mu, d_s). For a deterministic
    input (``s is None``) the input gradient flows through the mean channel
    only and ``d_s`` is None. ``patches`` reuses the forward's patch matrices.
    """
    k = m.shape[1]
    hw = mu.shape[1:3]
    if patches is None:
        patches, _ = conv_patches(mu, s, ksize, pad, gv is not None)
    pm, ps, pa = patches
    d_m = _patch_grad(pm, gm.reshape(-1, k))
    if gv is None:
        d_v = None if v is None else np.zeros_like(v)
        d_mu = conv_transpose(gm, m, hw, ksize, pad) if need_input else None
        return d_m, d_v, d_mu, None
    gv2 = gv.reshape(-1, k)
    d_v = _patch_grad(pa, gv2)
    if s is None:
        d_mu = conv_transpose(gm, m, hw, ksize, pad) if need_input else None
        return d_m, d_v, d_mu, None
    d_m += 2.0 * m * _patch_grad(ps, gv2)
    if not need_input:
        return d_m, d_v, None, None
    d_mu = conv_transpose(gm, m, hw, ksize, pad)
    both = conv_transpose(gv, _stack_kernels(v, m * m), hw, ksize, pad)
    both = both.reshape(mu.shape + (2,))
    d_mu += 2.0 * mu * both[..., 0]
    d_s = both[..., 0] + both[..., 1]
    return d_m, d_v, d_mu, d_s


def relu_fwd(mu, s):
    on = mu > 0
    return np.where(on, mu, 0.0), (None if s is None else np.where(on, s, 0.0)), on


def relu_bwd(gm, gv, on):
    return np.where(on, gm, 0.0), (None if gv is None else np.where(on, gv, 0.0))


def _windows(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise GeometryError(f"max-pool needs even spatial dims, got {h}x{w}")
    return (x.reshape(n, h // 2, 2, w // 2, 2, c)
             .transpose(0, 1, 3, 5, 2, 4)
             .reshape(n, h // 2, w // 2, c, 4))


def _unwindows(x, shape):
    n, h, w, c = shape
    return (x.reshape(n, h // 2, w // 2, c, 2, 2)
             .transpose(0, 1, 4, 2, 5, 3)
             .reshape(shape))


def maxpool_fwd(mu, s):
    wm = _windows(mu)
    idx = wm.argmax(axis=-1)
    mean = np.take_along_axis(wm, idx[..., None], axis=-1)[..., 0]
    var = None
    if s is not None:
        var = np.take_along_axis(_windows(s), idx[..., None], axis=-1)[..., 0]
    return mean, var, idx


def maxpool_bwd(gm, gv, idx, shape):
    onehot = idx[..., None] == np.arange(4)
    d_mu = _unwindows(onehot * gm[..., None], shape)
    d_s = None if gv is None else _unwindows(onehot * gv[..., None], shape)
    return d_mu, d_s


def upsample_fwd(x):
    n, h, w, c = x.shape
    out = np.zeros((n, 2 * h, 2 * w, c))
    out[:, ::2, ::2, :] = x
    return out


def upsample_bwd(g):
    return g[:, ::2, ::2, :]


def upconv_fwd(mu, s, m, v, keep=False):
    up_mu = upsample_fwd(mu)
    up_s = None if s is None else upsample_fwd(s)
    mean, var, patches = conv_fwd(up_mu, up_s, m, v, UPCONV_KERNEL, UPCONV_PAD, keep=True)
    return mean, var, (up_mu, up_s, patches if keep else None)


def upconv_bwd(gm, gv, up_mu, up_s, m, v, patches=None):
    d_m, d_v, d_mu, d_s = conv_bwd(gm, gv, up_mu, up_s, m, v, UPCONV_KERNEL, UPCONV_PAD,
                                   patches=patches)
    return d_m, d_v, upsample_bwd(d_mu), None if d_s is None else upsample_bwd(d_s)


def pad_fwd(mu, s, w, sigma_pa):
    if w == 0:
        return mu, s
    spec = ((0, 0), (w, w), (w, w), (0, 0))
    mean = np.pad(mu, spec)
    var = None if s is None else np.pad(s, spec, constant_values=sigma_pa)
    return mean, var


def pad_bwd(gm, gv, w):
    if w == 0:
        return gm, gv
    sl = (slice(None), slice(w, -w), slice(w, -w), slice(None))
    return gm[sl], None if gv is None else gv[sl]


def crop_offsets(src_hw, target_hw):
    return (src_hw[0] - target_hw[0]) // 2, (src_hw[1] - target_hw[1]) // 2


def crop_fwd(mu, s, target_hw):
    oy, ox = crop_offsets(mu.shape[1:3], target_hw)
    sl = (slice(None), slice(oy, oy + target_hw[0]), slice(ox, ox + target_hw[1]), slice(None))
    return mu[sl], None if s is None else s[sl]


def crop_bwd(g, src_shape):
    th, tw = g.shape[1:3]
    oy, ox = crop_offsets(src_shape[1:3], (th, tw))
    out = np.zeros(src_shape[:3] + (g.shape[3],))
    out[:, oy:oy + th, ox:ox + tw, :] = g
    return out


def softmax_diag_fwd(mu, s):
    """Softmax mean and the diagonal of J diag(s) J^T, per pixel.

    diag_c = p_c^2 (A + (1 - 2 p_c) s_c) with A = sum_k p_k^2 s_k.
    """
    p = softmax(mu)
    if s is None:
        return p, np.zeros_like(p)
    a = np.sum(p * p * s, axis=-1, keepdims=True)
    return p, p * p * (a + (1.0 - 2.0 * p) * s)


def softmax_diag_bwd(gp, gu, p, s):
    """Adjoint of :func:`softmax_diag_fwd` given dL/dp and dL/du."""
    if gu is not None and s is not None:
        p2 = p * p
        a = np.sum(p2 * s, axis=-1, keepdims=True)
        bsum = np.sum(gu * p2, axis=-1, keepdims=True)
        d_s = p2 * (bsum + gu * (1.0 - 2.0 * p))
        gp = gp + gu * (2.0 * p * (a + (1.0 - 2.0 * p) * s) - 2.0 * p2 * s) + 2.0 * p * s * bsum
    else:
        d_s = None
    d_mu = p * (gp - np.sum(gp * p, axis=-1, keepdims=True))
    return d_mu, d_s
