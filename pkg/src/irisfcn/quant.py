"""Post-training 8-bit dynamic fixed-point (DFP) quantization.

A DFP value is an int8 code ``q`` with a per-layer fractional length ``fl``
and real value ``q * 2**-fl``.  Fractional lengths are picked from observed
maxima so that nothing seen during calibration overflows.

Quantized dataflow per layer (all integer):

* CONV: ``gemm(Wq, cols)`` with the 32-bit bias added in the accumulator at
  ``w_fl + a_in``, rounded to ``a_out``, saturated, ReLU.
* TCONV: ``gemm(Wt, x)`` rounded to an intermediate ``c_fl`` and saturated,
  Col2Im summed in wide integers, bias added at ``c_fl``, ReLU, rounded to
  the branch fractional length and saturated.
* shortcut add: the operand with the larger fractional length is shifted
  right to the smaller one, the sum is rounded to ``a_out`` and saturated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError
from .fcn import (CONV, SOFTMAX, TCONV, Network, forward, network_input,
                  segment_with)
from .tensor import (col2im_batch, gemm_ref_q, im2col_batch, saturate,
                     shift_round)

BITWIDTH = 8
FL_MIN = -16
CALIBRATION_SIZE = 16
# input pixels are normalised to [0, 1]
INPUT_RANGE = 1.0


def fl_cap(bitwidth: int = BITWIDTH) -> int:
    """Fractional length used when the observed range is zero."""
    return bitwidth - 1 + 16


def choose_fl(max_abs: float, bitwidth: int = BITWIDTH) -> int:
    """Largest fl with ``max_abs <= (2**(bw-1) - 1) * 2**-fl``."""
    max_abs = float(max_abs)
    if not math.isfinite(max_abs) or max_abs < 0:
        raise ValidationError(f"range must be finite and non-negative, got {max_abs}")
    cap = fl_cap(bitwidth)
    if max_abs == 0:
        return cap
    qmax = (1 << (bitwidth - 1)) - 1
    fl = math.floor(math.log2(qmax / max_abs))
    # guard against log2 rounding on exact powers of two
    while qmax * 2.0 ** -fl < max_abs:
        fl -= 1
    while qmax * 2.0 ** -(fl + 1) >= max_abs:
        fl += 1
    return min(fl, cap)


def choose_weight_fl(weights, bitwidth: int = BITWIDTH) -> int:
    w = np.asarray(weights)
    if w.size == 0:
        raise ValidationError("cannot choose a fractional length for empty weights")
    return choose_fl(float(np.max(np.abs(w))), bitwidth)


def quantize_values(x, fl: int, bitwidth: int = BITWIDTH) -> np.ndarray:
    """``clamp(round(x * 2**fl))`` with ties rounded away from zero."""
    scaled = np.asarray(x, dtype=np.float64) * 2.0 ** fl
    codes = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    lo, hi = -(1 << (bitwidth - 1)), (1 << (bitwidth - 1)) - 1
    return np.clip(codes, lo, hi).astype(np.int64)


def dequantize(codes, fl: int) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) * 2.0 ** -fl


@dataclass
class DfpParams:
    """Per-layer DFP settings.

    ``c_fl`` is only used by TCONV layers (the rounding point of the GEMM
    output before Col2Im).  ``branch_fl`` is only used by layers with a
    shortcut and is the fractional length of the layer's own branch before
    the add; ``a_out`` is then the fractional length after the add.
    """

    w_bw: int = BITWIDTH
    a_bw: int = BITWIDTH
    w_fl: int = 0
    a_in: int = 0
    a_out: int = 0
    c_fl: int | None = None
    branch_fl: int | None = None

    def __post_init__(self):
        if self.w_bw != BITWIDTH or self.a_bw != BITWIDTH:
            raise ValidationError("only 8-bit weights and activations are supported")


@dataclass
class ActivationProfile:
    """Per-layer maxima from calibration passes (parallel to ``net.layers``)."""

    out_max: list
    col_max: list
    branch_max: list
    images: int = 0

    def merge(self, other: "ActivationProfile") -> "ActivationProfile":
        def mx(a, b):
            return [None if x is None else max(x, y) for x, y in zip(a, b)]
        return ActivationProfile(mx(self.out_max, other.out_max),
                                 mx(self.col_max, other.col_max),
                                 mx(self.branch_max, other.branch_max),
                                 self.images + other.images)


def _profile_one(net: Network, x: np.ndarray) -> ActivationProfile:
    _, outs, caches = forward(net, x[None].astype(np.float32), keep=True)
    n = len(net.layers)
    out_max, col_max, branch_max = [None] * n, [None] * n, [None] * n
    for i, layer in enumerate(net.layers):
        if layer.kind == SOFTMAX:
            continue
        out_max[i] = float(np.max(np.abs(outs[i])))
        colcache, z, _ = caches[i]
        if layer.kind == TCONV:
            w, _ = net.params[i]
            oc, k = w.shape[1], w.shape[2]
            wt = w.transpose(1, 2, 3, 0).reshape(oc * k * k, -1)
            col_max[i] = float(np.max(np.abs(wt @ colcache)))
        if layer.skip_partner is not None:
            a = np.maximum(z, 0) if layer.relu else z
            branch_max[i] = float(np.max(np.abs(a)))
    return ActivationProfile(out_max, col_max, branch_max, 1)


def profile_activations(net: Network, calibration_images) -> ActivationProfile:
    """Record per-layer maximum absolute activations over calibration images."""
    profile = None
    for image in calibration_images:
        x, _, _ = network_input(net, image)
        one = _profile_one(net, x)
        profile = one if profile is None else profile.merge(one)
    if profile is None:
        raise ValidationError("calibration set is empty")
    return profile


def derive_params(net: Network, profile: ActivationProfile) -> list:
    """DFP params per layer (``None`` for the softmax) from a profile."""
    a_prev = choose_fl(INPUT_RANGE)
    params = []
    for i, layer in enumerate(net.layers):
        if layer.kind == SOFTMAX:
            params.append(None)
            continue
        w, _ = net.params[i]
        p = DfpParams(w_fl=choose_weight_fl(w), a_in=a_prev,
                      a_out=choose_fl(profile.out_max[i]))
        if layer.kind == TCONV:
            p.c_fl = choose_fl(profile.col_max[i])
        if layer.skip_partner is not None:
            p.branch_fl = choose_fl(profile.branch_max[i])
        params.append(p)
        a_prev = p.a_out
    return params


def choose_calibration(images, size: int = CALIBRATION_SIZE, seed: int = 0) -> list:
    """Seeded random subset of at most ``size`` images."""
    images = list(images)
    if not images:
        raise ValidationError("calibration set is empty")
    if len(images) <= size:
        return images
    idx = np.random.default_rng(seed).choice(len(images), size=size, replace=False)
    return [images[i] for i in sorted(idx)]


@dataclass
class QuantizedNetwork:
    """Layer graph with int8 weights, int32 biases and per-layer DFP params.

    ``weights[i]`` / ``biases[i]`` / ``dfp[i]`` are ``None`` for the softmax.
    Biases sit at fractional length ``w_fl + a_in`` of their layer.
    """

    layers: list
    weights: list
    biases: list
    dfp: list
    scale: float = 1.0
    arch: object = None
    input_dims: tuple | None = None
    n_channels: int = 0
    input_fl: int = field(default_factory=lambda: choose_fl(INPUT_RANGE))

    def __post_init__(self):
        if not (len(self.layers) == len(self.weights) == len(self.biases) == len(self.dfp)):
            raise DimensionError("one weight/bias/params slot per layer is required")
        for i, layer in enumerate(self.layers):
            if layer.kind == SOFTMAX:
                continue
            if self.dfp[i] is None or tuple(self.weights[i].shape) != layer.weight_shape:
                raise DimensionError(f"layer {i} parameters do not match {layer}")
            if self.biases[i].shape != (layer.out_channels,):
                raise DimensionError(f"layer {i} bias shape {self.biases[i].shape}")
            if layer.kind == TCONV and self.dfp[i].c_fl is None:
                raise ValidationError(f"TCONV layer {i} lacks c_fl")
            if layer.skip_partner is not None and self.dfp[i].branch_fl is None:
                raise ValidationError(f"layer {i} lacks branch_fl")
        prev = self.input_fl
        for i, layer in enumerate(self.layers):
            if layer.kind == SOFTMAX:
                continue
            if self.dfp[i].a_in != prev:
                raise ValidationError(f"layer {i} a_in {self.dfp[i].a_in} != upstream a_out {prev}")
            prev = self.dfp[i].a_out

    @property
    def arch_string(self) -> str:
        return self.arch.arch_string if self.arch is not None else "custom"

    def dequantized(self) -> Network:
        """Float network holding the dequantized weights and biases."""
        params = []
        for w, b, p in zip(self.weights, self.biases, self.dfp):
            if p is None:
                params.append(None)
            else:
                params.append((dequantize(w, p.w_fl).astype(np.float32),
                               dequantize(b, p.w_fl + p.a_in).astype(np.float32)))
        return Network(list(self.layers), params, self.scale, self.arch,
                       self.input_dims, self.n_channels)


def quantize_network(net: Network, params: list) -> QuantizedNetwork:
    """Quantize weights to int8 and biases to int32 using ``params``."""
    if len(params) != len(net.layers):
        raise ValidationError("DFP params must cover every layer")
    weights, biases = [], []
    for layer, p, wb in zip(net.layers, params, net.params):
        if layer.kind == SOFTMAX:
            weights.append(None)
            biases.append(None)
            continue
        if p is None:
            raise ValidationError(f"missing DFP params for {layer}")
        w, b = wb
        weights.append(quantize_values(w, p.w_fl, p.w_bw).astype(np.int8))
        biases.append(quantize_values(b, p.w_fl + p.a_in, 32).astype(np.int32))
    return QuantizedNetwork(list(net.layers), weights, biases, list(params), net.scale,
                            net.arch, net.input_dims, net.n_channels)


def quantize(net: Network, calibration_images, size: int = CALIBRATION_SIZE,
             seed: int = 0) -> QuantizedNetwork:
    """Profile on a seeded calibration subset, then quantize."""
    calib = choose_calibration(calibration_images, size, seed)
    return quantize_network(net, derive_params(net, profile_activations(net, calib)))


def _align_add(x, x_fl, y, y_fl):
    """Add two code arrays after shifting the finer one down to the coarser fl."""
    common = min(x_fl, y_fl)
    return shift_round(x, x_fl - common) + shift_round(y, y_fl - common), common


def quantized_forward(qnet: QuantizedNetwork, x_codes: np.ndarray, gemm=gemm_ref_q):
    """Integer forward pass on ``(1, H, W)`` input codes at ``qnet.input_fl``.

    ``gemm`` has the signature of :func:`gemm_ref_q`; swapping it lets the
    accelerator model execute the same schedule.  Returns ``(2, H, W)``
    int64 logit codes.
    """
    x = np.asarray(x_codes)
    if not np.issubdtype(x.dtype, np.integer):
        raise ValidationError("quantized_forward takes integer input codes")
    h = x.astype(np.int64)[None]
    outs = []
    for i, layer in enumerate(qnet.layers):
        if layer.kind == SOFTMAX:
            outs.append(h)
            continue
        p = qnet.dfp[i]
        w = qnet.weights[i]
        bias = qnet.biases[i]
        bsz, c, ih, iw = h.shape
        k = layer.filter
        if layer.kind == CONV:
            cols = im2col_batch(h, k, layer.stride, layer.padding)
            oh, ow = layer.out_hw(ih, iw)
            y = gemm(w.reshape(w.shape[0], -1), cols, p.w_fl, p.a_in, p.a_out, bias)
            y = np.asarray(y, dtype=np.int64).reshape(-1, bsz, oh, ow).transpose(1, 0, 2, 3)
            y_fl = p.a_out
        else:
            oc = w.shape[1]
            xm = h.transpose(1, 0, 2, 3).reshape(c, -1)
            wt = w.transpose(1, 2, 3, 0).reshape(oc * k * k, c)
            cols = np.asarray(gemm(wt, xm, p.w_fl, p.a_in, p.c_fl, None), dtype=np.int64)
            oh, ow = layer.out_hw(ih, iw)
            y = col2im_batch(cols, (bsz, oc, oh, ow), k, layer.stride, layer.padding)
            y = y + shift_round(bias, p.w_fl + p.a_in - p.c_fl).reshape(1, -1, 1, 1)
            y_fl = p.c_fl
        if layer.relu:
            y = np.maximum(y, 0)
        if layer.skip_partner is not None:
            branch = saturate(shift_round(y, y_fl - p.branch_fl))
            partner_fl = qnet.dfp[layer.skip_partner].a_out
            y, y_fl = _align_add(branch, p.branch_fl, outs[layer.skip_partner], partner_fl)
        if y_fl != p.a_out:
            y = shift_round(y, y_fl - p.a_out)
        h = saturate(y)
        outs.append(h)
    return h[0]


def quantize_input(x: np.ndarray, fl: int) -> np.ndarray:
    return quantize_values(x, fl)


def quantized_infer(qnet: QuantizedNetwork, image: np.ndarray, gemm=gemm_ref_q) -> np.ndarray:
    """Boolean iris mask from integer-only CONV/TCONV arithmetic."""
    def run(x):
        return quantized_forward(qnet, quantize_input(x, qnet.input_fl), gemm)
    return segment_with(qnet, image, run)
