"""Dense tensor primitives: Im2Col/Col2Im, reference GEMMs and activations.

Tensors are plain numpy arrays in channel-major ``(C, H, W)`` layout.
Matrices are 2-D row-major arrays.  Dynamic fixed-point (DFP) values are
carried as integer arrays together with a separate fractional length
``fl``: the real value of a code ``q`` is ``q * 2**-fl``.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError

INT8_MIN, INT8_MAX = -128, 127


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_window(h, w, kernel, stride, padding):
    if kernel < 1 or stride < 1 or padding < 0:
        raise DimensionError(
            f"invalid window kernel={kernel} stride={stride} padding={padding}")
    if h + 2 * padding < kernel or w + 2 * padding < kernel:
        raise DimensionError(
            f"padded input {h}x{w} (+{padding}) admits no {kernel}x{kernel} window")


def im2col_batch(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    """Unroll a ``(B, C, H, W)`` batch into a ``(C*k*k, B*oh*ow)`` matrix.

    Row index is ``c*k*k + ky*k + kx``; column index is ``(b*oh + oy)*ow + ox``.
    """
    if x.ndim != 4 or 0 in x.shape:
        raise DimensionError(f"expected non-empty (B, C, H, W) input, got {x.shape}")
    b, c, h, w = x.shape
    _check_window(h, w, kernel, stride, padding)
    oh = conv_out_size(h, kernel, stride, padding)
    ow = conv_out_size(w, kernel, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, kernel, kernel, b, oh, ow), dtype=x.dtype)
    for ky in range(kernel):
        ys = slice(ky, ky + stride * (oh - 1) + 1, stride)
        for kx in range(kernel):
            xs = slice(kx, kx + stride * (ow - 1) + 1, stride)
            cols[:, ky, kx] = x[:, :, ys, xs].transpose(1, 0, 2, 3)
    return cols.reshape(c * kernel * kernel, b * oh * ow)


def col2im_batch(cols: np.ndarray, dims, kernel: int, stride: int,
                 padding: int) -> np.ndarray:
    """Scatter-add adjoint of :func:`im2col_batch`; ``dims`` is ``(B, C, H, W)``."""
    b, c, h, w = dims
    if min(dims) < 1:
        raise DimensionError(f"invalid output dims {dims}")
    _check_window(h, w, kernel, stride, padding)
    oh = conv_out_size(h, kernel, stride, padding)
    ow = conv_out_size(w, kernel, stride, padding)
    if cols.shape != (c * kernel * kernel, b * oh * ow):
        raise DimensionError(
            f"column matrix {cols.shape} inconsistent with dims {dims}, "
            f"expected {(c * kernel * kernel, b * oh * ow)}")
    cols = cols.reshape(c, kernel, kernel, b, oh, ow)
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for ky in range(kernel):
        ys = slice(ky, ky + stride * (oh - 1) + 1, stride)
        for kx in range(kernel):
            xs = slice(kx, kx + stride * (ow - 1) + 1, stride)
            out[:, :, ys, xs] += cols[:, ky, kx].transpose(1, 0, 2, 3)
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(out)


def im2col(x: np.ndarray, kernel: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Unroll a ``(C, H, W)`` tensor into a ``(C*k*k, oh*ow)`` column matrix.

    Column ``j`` holds the receptive field of output pixel ``j`` (row-major);
    reads that fall in the zero padding yield 0.
    """
    x = np.asarray(x)
    if x.ndim != 3 or 0 in x.shape:
        raise DimensionError(f"expected non-empty (C, H, W) tensor, got {x.shape}")
    return im2col_batch(x[None], kernel, stride, padding)


def col2im(cols: np.ndarray, dims, kernel: int, stride: int = 1,
           padding: int = 0) -> np.ndarray:
    """Fold a column matrix back into a ``dims = (C, H, W)`` tensor.

    Overlapping window contributions are summed, which makes this the exact
    adjoint of :func:`im2col`.
    """
    if len(dims) != 3:
        raise DimensionError(f"expected (C, H, W) dims, got {dims}")
    return col2im_batch(np.asarray(cols), (1, *dims), kernel, stride, padding)[0]


def gemm_ref(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Float32 matrix product with a fixed, k-sequential accumulation order.

    Every output element is accumulated as ``((a0*b0 + a1*b1) + a2*b2) + ...``
    so results are bit-reproducible regardless of BLAS or thread count.
    """
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"gemm shape mismatch {a.shape} x {b.shape}")
    acc = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    for k in range(a.shape[1]):
        acc += a[:, k, None] * b[None, k, :]
    return acc


def shift_round(x, shift: int):
    """Arithmetic right shift by ``shift`` bits with round-half-away-from-zero.

    A negative ``shift`` is an exact left shift.
    """
    x = np.asarray(x, dtype=np.int64)
    if shift <= 0:
        return x << -shift
    half = np.int64(1) << (shift - 1)
    mag = (np.abs(x) + half) >> shift
    return np.where(x < 0, -mag, mag)


def saturate(x, bits: int = 8):
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return np.clip(np.asarray(x, dtype=np.int64), lo, hi)


def gemm_ref_q(a: np.ndarray, b: np.ndarray, a_fl: int, b_fl: int, out_fl: int,
               bias: np.ndarray | None = None) -> np.ndarray:
    """Integer reference GEMM for 8-bit DFP operands.

    Products and their sum are formed exactly in 64-bit integers at
    fractional length ``a_fl + b_fl``.  An optional per-row ``bias`` (already
    at that fractional length) is added to the accumulator.  The result is
    rounded to ``out_fl`` and saturated to int8.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"gemm shape mismatch {a.shape} x {b.shape}")
    acc = a.astype(np.int64) @ b.astype(np.int64)
    if bias is not None:
        acc = acc + np.asarray(bias, dtype=np.int64).reshape(-1, 1)
    out = saturate(shift_round(acc, a_fl + b_fl - out_fl), 8)
    return out.astype(np.int8)


def relu(t):
    return np.maximum(t, 0)


def softmax2(logits: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over exactly two channels of a ``(2, H, W)`` tensor."""
    logits = np.asarray(logits)
    if logits.ndim != 3 or logits.shape[0] != 2:
        raise DimensionError(f"softmax2 needs a (2, H, W) tensor, got {logits.shape}")
    # sigmoid of the logit difference is the numerically stable 2-class form
    d = (logits[1] - logits[0]).astype(np.float64)
    p1 = np.empty_like(d)
    pos = d >= 0
    p1[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    p1[~pos] = e / (1.0 + e)
    return np.stack([1.0 - p1, p1]).astype(logits.dtype if logits.dtype.kind == "f"
                                            else np.float64)


def nearest_resize(t: np.ndarray, scale: float | None = None, out_dims=None) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes.

    With ``scale`` the output is ``round(scale * dims)`` and source index
    ``floor(dest / scale)``; with explicit ``out_dims`` the source index is
    ``floor(dest * in / out)``.  Indices are clamped to the input.
    """
    t = np.asarray(t)
    h, w = t.shape[-2:]
    if out_dims is None:
        if scale is None or scale <= 0:
            raise DimensionError(f"scale must be positive, got {scale}")
        oh, ow = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
        ys = np.floor(np.arange(oh) / scale).astype(np.int64)
        xs = np.floor(np.arange(ow) / scale).astype(np.int64)
    else:
        oh, ow = out_dims
        if oh < 1 or ow < 1:
            raise DimensionError(f"invalid resize target {out_dims}")
        ys = (np.arange(oh) * h) // oh
        xs = (np.arange(ow) * w) // ow
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    return t[..., ys[:, None], xs[None, :]]
