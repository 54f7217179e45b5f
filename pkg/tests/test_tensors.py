import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmpseg.tensors import (
    SENTINEL,
    DataError,
    GeometryError,
    as_tensor,
    col2im,
    extract_patches,
    im2col,
    matvec,
    normalize_pad,
)


def naive_conv(src, w, kernel, pad):
    """Nested-loop correlation with zero padding; w has shape (kh, kw, C)."""
    h, wd, c = src.shape
    kh, kw = kernel
    t, b, l, r = normalize_pad(pad)
    padded = np.zeros((h + t + b, wd + l + r, c))
    padded[t:t + h, l:l + wd] = src
    oh, ow = h + t + b - kh + 1, wd + l + r - kw + 1
    out = np.zeros((oh, ow))
    for y in range(oh):
        for x in range(ow):
            acc = 0.0
            for dy in range(kh):
                for dx in range(kw):
                    for ch in range(c):
                        acc += padded[y + dy, x + dx, ch] * w[dy, dx, ch]
            out[y, x] = acc
    return out


def test_one_by_one_kernel_is_identity_gather():
    src = np.arange(4.0).reshape(2, 2, 1)
    pm = extract_patches(src, (1, 1))
    assert pm.rows == 4 and pm.cols == 1
    np.testing.assert_array_equal(pm.index[:, 0], np.arange(4))
    np.testing.assert_array_equal(pm.data[:, 0], [0, 1, 2, 3])


def test_two_by_two_patches_hand_enumerated():
    src = np.arange(1.0, 10.0).reshape(3, 3, 1)
    pm = extract_patches(src, (2, 2))
    np.testing.assert_array_equal(pm.data, [[1, 2, 4, 5], [2, 3, 5, 6], [4, 5, 7, 8], [5, 6, 8, 9]])
    assert pm.out_hw == (2, 2)


def test_kernel_larger_than_input_rejected():
    with pytest.raises(GeometryError):
        extract_patches(np.zeros((2, 2, 1)), (3, 3))


def test_nonfinite_input_rejected():
    src = np.zeros((3, 3, 1))
    src[1, 1, 0] = np.nan
    with pytest.raises(DataError):
        extract_patches(src, (2, 2))
    with pytest.raises(DataError):
        as_tensor([1.0, np.inf])


def test_padding_positions_are_sentinels():
    pm = extract_patches(np.ones((2, 2, 1)), (3, 3), zero_pad=1)
    assert pm.rows == 4
    # corner output sees 4 real pixels and 5 padding slots
    assert np.sum(pm.index[0] == SENTINEL) == 5
    assert pm.data[0].sum() == 4.0
    valid = pm.index[pm.index != SENTINEL]
    assert valid.min() >= 0 and valid.max() < 4


def test_matvec_examples():
    pm = extract_patches(np.array([[[5.0]]]), (1, 1))
    np.testing.assert_array_equal(matvec(pm, [2.0]), [10.0])
    np.testing.assert_array_equal(matvec(np.array([[1.0, 2.0], [3.0, 4.0]]), [1.0, 1.0]), [3.0, 7.0])
    with pytest.raises(GeometryError):
        matvec(pm, [1.0, 2.0])


def test_one_hot_matvec_is_strided_gather_exhaustive():
    rng = np.random.default_rng(0)
    for h in range(1, 7):
        for w in range(1, 7):
            for c in range(1, 4):
                src = rng.normal(size=(h, w, c))
                for kh, kw in [(1, 1), (2, 2), (3, 3), (2, 3)]:
                    if kh > h or kw > w:
                        continue
                    pm = extract_patches(src, (kh, kw))
                    oh, ow = pm.out_hw
                    for dy in range(kh):
                        for dx in range(kw):
                            for ch in range(c):
                                v = np.zeros(pm.cols)
                                v[(dy * kw + dx) * c + ch] = 1.0
                                got = matvec(pm, v).reshape(oh, ow)
                                np.testing.assert_array_equal(got, src[dy:dy + oh, dx:dx + ow, ch])


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 6), w=st.integers(1, 6), c=st.integers(1, 3),
       k=st.sampled_from([(1, 1), (2, 2), (3, 3), (3, 2)]), pad=st.integers(0, 2),
       seed=st.integers(0, 2**31))
def test_patches_match_naive_convolution(h, w, c, k, pad, seed):
    if k[0] > h + 2 * pad or k[1] > w + 2 * pad:
        return
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(h, w, c))
    wt = rng.normal(size=k + (c,))
    pm = extract_patches(src, k, zero_pad=pad)
    got = matvec(pm, wt.ravel()).reshape(pm.out_hw)
    np.testing.assert_allclose(got, naive_conv(src, wt, k, pad), rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(h=st.integers(2, 6), w=st.integers(2, 6), c=st.integers(1, 3), pad=st.integers(0, 1),
       seed=st.integers(0, 2**31))
def test_scatter_add_is_convolution_transpose(h, w, c, pad, seed):
    rng = np.random.default_rng(seed)
    k = (2, 2)
    src = rng.normal(size=(h, w, c))
    pm = extract_patches(src, k, zero_pad=pad)
    g = rng.normal(size=pm.rows)
    wt = rng.normal(size=pm.cols)
    # <conv(x), g> == <x, conv^T(g)> with conv^T realized by scatter_add
    back = pm.scatter_add(np.outer(g, wt))
    expected = np.zeros_like(src)
    oh, ow = pm.out_hw
    wk = wt.reshape(2, 2, c)
    for y in range(oh):
        for x in range(ow):
            for dy in range(2):
                for dx in range(2):
                    sy, sx = y + dy - pad, x + dx - pad
                    if 0 <= sy < h and 0 <= sx < w:
                        expected[sy, sx] += g[y * ow + x] * wk[dy, dx]
    np.testing.assert_allclose(back, expected, rtol=0, atol=1e-12)
    assert np.isclose(np.dot(matvec(pm, wt), g), np.sum(src * back))


def test_gather_reads_sentinels_as_zero():
    src = np.arange(4.0).reshape(2, 2, 1)
    pm = extract_patches(src, (2, 2), zero_pad=1)
    np.testing.assert_array_equal(pm.gather(src), pm.data)
    with pytest.raises(GeometryError):
        pm.gather(np.zeros(5))


def test_batched_im2col_matches_extract_patches():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 5, 4, 2))
    cols, hw = im2col(x, (3, 3), (1, 0, 2, 1))
    assert hw == (4, 5)
    per = np.concatenate([extract_patches(xi, (3, 3), zero_pad=(1, 0, 2, 1)).data for xi in x])
    np.testing.assert_array_equal(cols, per)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 4, 5, 3))
    cols, _ = im2col(x, (3, 2), 1)
    g = rng.normal(size=cols.shape)
    assert np.isclose(np.sum(cols * g), np.sum(x * col2im(g, x.shape, (3, 2), 1)))


def test_bad_padding_rejected():
    with pytest.raises(GeometryError):
        normalize_pad((1, 2))
    with pytest.raises(GeometryError):
        normalize_pad(-1)
