import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irisfcn.errors import DimensionError
from irisfcn.tensor import (col2im, col2im_batch, gemm_ref, gemm_ref_q, im2col,
                            im2col_batch, nearest_resize, relu, saturate, shift_round,
                            softmax2)


def brute_windows(x, k, s, p):
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    oh, ow = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
    cols = np.zeros((c * k * k, oh * ow))
    for oy in range(oh):
        for ox in range(ow):
            cols[:, oy * ow + ox] = xp[:, oy * s:oy * s + k, ox * s:ox * s + k].reshape(-1)
    return cols


def test_im2col_center_column_of_padded_ones():
    cols = im2col(np.ones((1, 3, 3)), 3, 1, 1)
    assert cols.shape == (9, 9)
    np.testing.assert_array_equal(cols[:, 4], np.ones(9))
    assert cols[:, 0].sum() == 4  # corner window sees 4 real pixels


def test_im2col_kernel_one_is_flattening():
    cols = im2col(np.array([[[1.0, 2], [3, 4]]]), 1)
    np.testing.assert_array_equal(cols, [[1, 2, 3, 4]])


def test_im2col_matches_brute_force_windows(rng):
    x = rng.normal(size=(2, 5, 5))
    np.testing.assert_array_equal(im2col(x, 3, 2, 1), brute_windows(x, 3, 2, 1))


def test_im2col_rejects_empty_input():
    with pytest.raises(DimensionError):
        im2col(np.zeros((1, 0, 4)), 1)


def test_col2im_ones_column():
    out = col2im(np.ones((9, 1)), (1, 3, 3), 3, 1, 0)
    np.testing.assert_array_equal(out, np.ones((1, 3, 3)))


def test_col2im_rejects_inconsistent_dims():
    with pytest.raises(DimensionError):
        col2im(np.ones((9, 2)), (1, 3, 3), 3, 1, 0)


@settings(max_examples=40, deadline=None)
@given(c=st.integers(1, 3), h=st.integers(1, 7), w=st.integers(1, 7),
       k=st.integers(1, 4), s=st.integers(1, 3), p=st.integers(0, 2), seed=st.integers(0, 99))
def test_col2im_is_adjoint_of_im2col(c, h, w, k, s, p, seed):
    if h + 2 * p < k or w + 2 * p < k:
        return
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(c, h, w))
    cols = im2col(x, k, s, p)
    y = rng.normal(size=cols.shape)
    lhs = float(np.sum(cols * y))
    rhs = float(np.sum(x * col2im(y, (c, h, w), k, s, p)))
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


@settings(max_examples=20, deadline=None)
@given(c=st.integers(1, 3), h=st.integers(1, 6), w=st.integers(1, 6), seed=st.integers(0, 99))
def test_kernel_one_round_trip(c, h, w, seed):
    x = np.random.default_rng(seed).normal(size=(c, h, w))
    np.testing.assert_array_equal(col2im(im2col(x, 1), (c, h, w), 1), x)


def test_batch_columns_are_image_major(rng):
    x = rng.normal(size=(2, 1, 4, 4))
    cols = im2col_batch(x, 3, 1, 1)
    np.testing.assert_array_equal(cols[:, :16], im2col(x[0], 3, 1, 1))
    np.testing.assert_array_equal(cols[:, 16:], im2col(x[1], 3, 1, 1))
    back = col2im_batch(cols, x.shape, 3, 1, 1)
    np.testing.assert_array_equal(back[1], col2im(cols[:, 16:], (1, 4, 4), 3, 1, 1))


def test_gemm_examples():
    np.testing.assert_array_equal(gemm_ref(np.array([[1, 2], [3, 4]]), np.array([[5], [6]])),
                                  [[17], [39]])
    b = np.arange(12, dtype=np.float32).reshape(3, 4)
    np.testing.assert_array_equal(gemm_ref(np.eye(3), b), b)
    assert gemm_ref(np.ones((1, 37)), np.ones((37, 1)))[0, 0] == 37


def test_gemm_is_float32_and_close_to_matmul(rng):
    a, b = rng.normal(size=(7, 13)), rng.normal(size=(13, 5))
    out = gemm_ref(a, b)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, a @ b, rtol=1e-5, atol=1e-5)
    with pytest.raises(DimensionError):
        gemm_ref(a, a)


def test_shift_round_half_away_from_zero():
    np.testing.assert_array_equal(shift_round([5, -5, 4, -4, 6, 7], 1), [3, -3, 2, -2, 3, 4])
    np.testing.assert_array_equal(shift_round([3, -3], -2), [12, -12])
    np.testing.assert_array_equal(saturate([-300, 300, 5]), [-128, 127, 5])


def test_gemm_ref_q_examples():
    assert gemm_ref_q(np.array([[16]]), np.array([[16]]), 4, 4, 4)[0, 0] == 16
    assert gemm_ref_q(np.array([[127]]), np.array([[127]]), 0, 0, 0)[0, 0] == 127
    assert gemm_ref_q(np.array([[-128]]), np.array([[127]]), 0, 0, 0)[0, 0] == -128
    # bias sits at a_fl + b_fl
    assert gemm_ref_q(np.array([[16]]), np.array([[16]]), 4, 4, 4, bias=np.array([256]))[0, 0] == 32


def test_gemm_ref_q_matches_wide_oracle(rng):
    for _ in range(50):
        a = rng.integers(-128, 128, (4, 4))
        b = rng.integers(-128, 128, (4, 4))
        a_fl, b_fl, o_fl = (int(v) for v in rng.integers(0, 8, 3))
        exact = (a * 2.0 ** -a_fl) @ (b * 2.0 ** -b_fl) * 2.0 ** o_fl
        oracle = np.clip(np.sign(exact) * np.floor(np.abs(exact) + 0.5), -128, 127)
        out = gemm_ref_q(a, b, a_fl, b_fl, o_fl)
        assert out.dtype == np.int8
        np.testing.assert_array_equal(out, oracle)


def test_relu_and_softmax():
    np.testing.assert_array_equal(relu(np.array([-1.0, 0, 2])), [0, 0, 2])
    p = softmax2(np.zeros((2, 3, 3)))
    np.testing.assert_array_equal(p, np.full((2, 3, 3), 0.5))
    q = softmax2(np.random.default_rng(0).normal(size=(2, 4, 4)) * 50)
    np.testing.assert_allclose(q.sum(0), 1.0)
    with pytest.raises(DimensionError):
        softmax2(np.zeros((3, 2, 2)))


def test_nearest_resize_checkerboard():
    board = (np.add.outer(np.arange(4), np.arange(4)) % 2).astype(float)
    board[0, 0] = 5
    out = nearest_resize(board, 0.5)
    np.testing.assert_array_equal(out, board[::2, ::2])


def test_nearest_resize_to_dims_round_trip():
    img = np.arange(12).reshape(3, 4)
    up = nearest_resize(img, out_dims=(6, 8))
    np.testing.assert_array_equal(up[::2, ::2], img)
    np.testing.assert_array_equal(nearest_resize(up, out_dims=(3, 4)), img)
