"""Encoder/decoder FCN family: architecture strings, layer graphs, inference.

An architecture is described by an input scale, a base channel count ``N``
and a list of group numbers such as ``0-1-2-3-4-3-2-1-0``.  Each group
number expands into the layers below; decoder groups receive an
element-wise shortcut from the last CONV of the encoder group with the same
number.

=====  ==========================  ===========================
group  encoder                     decoder
=====  ==========================  ===========================
0      CONV 3x3/1 -> N             TCONV 4x4/2 -> N, CONV 1x1 -> 2
1-3    CONV 3x3/2, CONV 3x3/1 -> 2N  TCONV 4x4/2 -> 2N, CONV 3x3/1 -> 2N
4      CONV 3x3/2 -> 2N, CONV 3x3/1 -> 4N
=====  ==========================  ===========================
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError
from .tensor import (col2im_batch, conv_out_size, gemm_ref, im2col_batch,
                     nearest_resize, softmax2)

CONV, TCONV, SOFTMAX = "CONV", "TCONV", "SOFTMAX"
KIND_CODES = {CONV: 0, TCONV: 1, SOFTMAX: 2}

VALID_SCALES = (1.0, 0.5, 0.25)
VALID_N = (4, 6, 8, 12, 16)
# bottleneck (group 4 output) sits at this fraction of the original resolution
BOTTLENECK_DIVISOR = 16


@dataclass(frozen=True)
class ArchSpec:
    scale: float
    n_channels: int
    groups: tuple

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(int(g) for g in self.groups))
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def parse(cls, arch: str, scale: float = 1.0, n_channels: int = 16) -> "ArchSpec":
        try:
            groups = tuple(int(tok) for tok in arch.strip().split("-"))
        except ValueError:
            raise ValidationError(f"malformed architecture string {arch!r}") from None
        return cls(scale, n_channels, groups)

    @property
    def arch_string(self) -> str:
        return "-".join(str(g) for g in self.groups)

    @property
    def encoder(self):
        return self.groups[:self.groups.index(4) + 1]

    @property
    def decoder(self):
        return self.groups[self.groups.index(4) + 1:]

    def validate(self):
        g = self.groups
        if self.scale not in VALID_SCALES:
            raise ValidationError(f"scale must be one of {VALID_SCALES}, got {self.scale}")
        if self.n_channels not in VALID_N:
            raise ValidationError(f"N must be one of {VALID_N}, got {self.n_channels}")
        if any(x < 0 or x > 4 for x in g):
            raise ValidationError(f"group numbers must lie in 0..4: {self.arch_string}")
        if g.count(4) != 1:
            raise ValidationError("exactly one bottleneck group 4 is required")
        if g != g[::-1]:
            raise ValidationError(f"group list must be a palindrome: {self.arch_string}")
        enc = self.encoder
        if enc[0] != 0:
            raise ValidationError("group list must start and end with group 0")
        if any(b <= a for a, b in zip(enc, enc[1:])):
            raise ValidationError("encoder groups must be strictly increasing")
        if self.downsample_steps > self.target_log2_stride:
            raise ValidationError(
                f"{self.arch_string} at scale {self.scale} would shrink the bottleneck "
                f"below 1/{BOTTLENECK_DIVISOR} of the original resolution")
        return self

    @property
    def downsample_steps(self) -> int:
        """Number of strided encoder groups (every group except 0)."""
        return len(self.encoder) - 1

    @property
    def target_log2_stride(self) -> int:
        return int(round(math.log2(BOTTLENECK_DIVISOR * self.scale)))

    @property
    def bottleneck_stride(self) -> int:
        """Stride of the group-4 strided CONV (and its decoder TCONV).

        Normally 2; larger when groups were removed, so the bottleneck stays at
        the fixed fraction of the original resolution.
        """
        extra = self.target_log2_stride - self.downsample_steps
        return 2 ** (1 + extra)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filter: int = 0
    stride: int = 1
    padding: int = 0
    in_channels: int = 0
    out_channels: int = 0
    relu: bool = True
    group: int | None = None
    skip_partner: int | None = None

    def out_hw(self, h, w):
        if self.kind == CONV:
            return (conv_out_size(h, self.filter, self.stride, self.padding),
                    conv_out_size(w, self.filter, self.stride, self.padding))
        if self.kind == TCONV:
            return ((h - 1) * self.stride - 2 * self.padding + self.filter,
                    (w - 1) * self.stride - 2 * self.padding + self.filter)
        return h, w

    @property
    def weight_shape(self):
        if self.kind == CONV:
            return (self.out_channels, self.in_channels, self.filter, self.filter)
        if self.kind == TCONV:
            return (self.in_channels, self.out_channels, self.filter, self.filter)
        return None


def tconv_geometry(stride: int):
    """(kernel, padding) for a TCONV that upsamples exactly by ``stride``."""
    kernel = max(4, stride)
    return kernel, (kernel - stride) // 2


def arch_layers(spec: ArchSpec) -> list[LayerSpec]:
    n = spec.n_channels
    s4 = spec.bottleneck_stride
    layers: list[LayerSpec] = []
    partner: dict[int, int] = {}
    c = 1

    def add(layer):
        layers.append(layer)
        return len(layers) - 1

    for g in spec.encoder:
        if g == 0:
            add(LayerSpec(CONV, 3, 1, 1, c, n, group=0))
            c = n
        else:
            add(LayerSpec(CONV, 3, s4 if g == 4 else 2, 1, c, 2 * n, group=g))
            out = 4 * n if g == 4 else 2 * n
            add(LayerSpec(CONV, 3, 1, 1, 2 * n, out, group=g))
            c = out
        partner[g] = len(layers) - 1
    for i, g in enumerate(spec.decoder):
        stride = s4 if i == 0 else 2
        k, p = tconv_geometry(stride)
        out = n if g == 0 else 2 * n
        add(LayerSpec(TCONV, k, stride, p, c, out, group=g, skip_partner=partner[g]))
        if g == 0:
            # 1x1 head: padding 0 keeps spatial dims
            add(LayerSpec(CONV, 1, 1, 0, out, 2, relu=False, group=0))
            c = 2
        else:
            add(LayerSpec(CONV, 3, 1, 1, out, 2 * n, group=g))
            c = 2 * n
    add(LayerSpec(SOFTMAX, in_channels=2, out_channels=2, relu=False))
    return layers


@dataclass
class Network:
    """Realised layer graph plus float parameters.

    ``params[i]`` is ``(weight, bias)`` for CONV/TCONV layers and ``None``
    for the softmax.  CONV weights are ``(out, in, k, k)``; TCONV weights
    are ``(in, out, k, k)``.
    """

    layers: list
    params: list
    scale: float = 1.0
    arch: ArchSpec | None = None
    input_dims: tuple | None = None
    n_channels: int = 0

    def __post_init__(self):
        if len(self.params) != len(self.layers):
            raise DimensionError("one parameter slot per layer is required")
        for layer, p in zip(self.layers, self.params):
            if layer.kind == SOFTMAX:
                continue
            w, b = p
            if tuple(w.shape) != layer.weight_shape or b.shape != (layer.out_channels,):
                raise DimensionError(
                    f"weights {w.shape}/{b.shape} do not match layer {layer}")

    @property
    def arch_string(self) -> str:
        return self.arch.arch_string if self.arch else "custom"

    @property
    def compute_layers(self):
        return [i for i, l in enumerate(self.layers) if l.kind != SOFTMAX]

    @property
    def downsample(self) -> int:
        return total_stride(self.layers)

    def layer_dims(self, h: int, w: int):
        """Output ``(C, H, W)`` of every layer for an ``h x w`` network input."""
        dims = []
        c = 1
        for i, layer in enumerate(self.layers):
            if layer.kind != SOFTMAX and layer.in_channels != c:
                raise DimensionError(f"layer {i} expects {layer.in_channels} channels, gets {c}")
            h, w = layer.out_hw(h, w)
            if h < 1 or w < 1:
                raise DimensionError(f"layer {i} collapses spatial dims")
            c = layer.out_channels
            if layer.skip_partner is not None and dims[layer.skip_partner] != (c, h, w):
                raise DimensionError(
                    f"skip partner {layer.skip_partner} dims {dims[layer.skip_partner]} "
                    f"!= layer {i} dims {(c, h, w)}")
            dims.append((c, h, w))
        return dims

    def copy(self) -> "Network":
        params = [None if p is None else (p[0].copy(), p[1].copy()) for p in self.params]
        return Network(list(self.layers), params, self.scale, self.arch,
                       self.input_dims, self.n_channels)


def init_params(layers, seed=0, dtype=np.float32):
    """He-style uniform init scaled by fan-in; biases start at zero."""
    rng = np.random.default_rng(seed)
    params = []
    for layer in layers:
        if layer.kind == SOFTMAX:
            params.append(None)
            continue
        if layer.kind == CONV:
            fan_in = layer.in_channels * layer.filter ** 2
        else:
            fan_in = layer.in_channels * (layer.filter // layer.stride) ** 2
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=layer.weight_shape).astype(dtype)
        params.append((w, np.zeros(layer.out_channels, dtype=dtype)))
    return params


def build_arch(spec: ArchSpec, input_dims=None, seed: int = 0) -> Network:
    spec.validate()
    layers = arch_layers(spec)
    net = Network(layers, init_params(layers, seed), spec.scale, spec,
                  tuple(input_dims) if input_dims else None, spec.n_channels)
    step = BOTTLENECK_DIVISOR
    net.layer_dims(step * 2, step * 2)
    if input_dims is not None:
        h, w = network_input_dims(net, input_dims)
        net.layer_dims(h, w)
    return net


def bottleneck_index(net: Network) -> int:
    for i, l in enumerate(net.layers):
        if l.group == 4:
            last = i
    return last


def scaled_dims(dims, scale):
    h, w = dims
    return max(1, int(round(h * scale))), max(1, int(round(w * scale)))


def total_stride(layers) -> int:
    f = 1
    for l in layers:
        if l.kind == CONV:
            f *= l.stride
    return f


def padded_dims(dims, scale, layers):
    """Scaled dims zero-padded up to a multiple of the layers' total stride."""
    h, w = scaled_dims(dims, scale)
    f = total_stride(layers)
    return -(-h // f) * f, -(-w // f) * f


def network_input_dims(net: Network, dims):
    return padded_dims(dims, net.scale, net.layers)


# ---------------------------------------------------------------------------
# float forward pass

def conv_forward(x, w, b, stride, padding, matmul=np.matmul):
    bsz = x.shape[0]
    oc, _, k, _ = w.shape
    cols = im2col_batch(x, k, stride, padding)
    oh = conv_out_size(x.shape[2], k, stride, padding)
    ow = conv_out_size(x.shape[3], k, stride, padding)
    y = matmul(w.reshape(oc, -1), cols).reshape(oc, bsz, oh, ow).transpose(1, 0, 2, 3)
    return y + b.reshape(1, -1, 1, 1), cols


def tconv_forward(x, w, b, stride, padding, matmul=np.matmul):
    bsz, c, h, wd = x.shape
    _, oc, k, _ = w.shape
    xm = x.transpose(1, 0, 2, 3).reshape(c, -1)
    wt = w.transpose(1, 2, 3, 0).reshape(oc * k * k, c)
    cols = matmul(wt, xm)
    oh = (h - 1) * stride - 2 * padding + k
    ow = (wd - 1) * stride - 2 * padding + k
    y = col2im_batch(cols, (bsz, oc, oh, ow), k, stride, padding)
    return y + b.reshape(1, -1, 1, 1), xm


def forward(net: Network, x: np.ndarray, matmul=np.matmul, keep=False):
    """Run every layer on a ``(B, 1, H, W)`` batch; returns final logits.

    With ``keep=True`` also returns the list of per-layer outputs and the
    per-layer cache (column matrices / pre-activation values) needed for
    backpropagation and activation profiling.
    """
    outs, caches = [], []
    h = x
    for i, (layer, p) in enumerate(zip(net.layers, net.params)):
        if layer.kind == SOFTMAX:
            outs.append(h)
            caches.append(None)
            continue
        w, b = p
        if layer.kind == CONV:
            z, colcache = conv_forward(h, w, b, layer.stride, layer.padding, matmul)
        else:
            z, colcache = tconv_forward(h, w, b, layer.stride, layer.padding, matmul)
        a = np.maximum(z, 0) if layer.relu else z
        if layer.skip_partner is not None:
            a = a + outs[layer.skip_partner]
        if keep:
            caches.append((colcache, z, h.shape))
        outs.append(a)
        h = a
    if keep:
        return h, outs, caches
    return h


def prepare_input(image: np.ndarray) -> np.ndarray:
    """2-D or ``(1, H, W)`` image -> float32 array in [0, 1]."""
    image = np.asarray(image)
    if image.ndim == 3:
        if image.shape[0] != 1:
            raise DimensionError(f"expected a single-channel image, got {image.shape}")
        image = image[0]
    if image.ndim != 2:
        raise DimensionError(f"expected a 2-D image, got {image.shape}")
    if image.dtype.kind in "ui":
        return image.astype(np.float32) / 255.0
    return image.astype(np.float32)


def pad_to(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """Zero-pad the last two axes at the bottom/right."""
    ph, pw = h - x.shape[-2], w - x.shape[-1]
    if ph == 0 and pw == 0:
        return x
    pads = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(x, pads)


def network_input(net: Network, image: np.ndarray):
    """Normalise, downscale and pad an image for ``net``.

    Returns ``(x, scaled_hw, original_hw)`` with ``x`` a ``(1, H, W)`` float32
    array whose dims are multiples of the network's total stride.
    """
    img = prepare_input(image)
    orig = img.shape
    sd = scaled_dims(orig, net.scale)
    small = nearest_resize(img, out_dims=sd) if sd != orig else img
    ph, pw = network_input_dims(net, orig)
    return pad_to(small, ph, pw)[None], sd, orig


def segment_with(net: Network, image: np.ndarray, logits_fn) -> np.ndarray:
    """Shared scaling / padding / mask recovery around an engine's forward.

    ``logits_fn`` maps a padded ``(1, H, W)`` float input to ``(2, H, W)``
    logits (float) or integer logit codes.
    """
    x, (sh, sw), orig = network_input(net, image)
    logits = logits_fn(x)[:, :sh, :sw]
    if np.issubdtype(logits.dtype, np.integer):
        mask = logits[1] > logits[0]
    else:
        p = softmax2(logits)
        mask = p[1] > p[0]
    if mask.shape != orig:
        mask = nearest_resize(mask, out_dims=orig)
    return mask


def infer(net: Network, image: np.ndarray) -> np.ndarray:
    """Float32 inference; returns a boolean iris mask at the image's resolution.

    CONV layers run as Im2Col + :func:`gemm_ref`, TCONV layers as
    :func:`gemm_ref` + Col2Im.  Ties between the two classes go to background.
    """
    def run(x):
        return forward(net, x[None].astype(np.float32), matmul=gemm_ref)[0]
    return segment_with(net, image, run)


# ---------------------------------------------------------------------------
# batch-norm folding

@dataclass
class BnParams:
    mu: np.ndarray
    sigma_sq: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        if np.any(np.asarray(self.sigma_sq) < 0):
            raise ValidationError("sigma_sq must be non-negative")

    def apply(self, y):
        """Reference BN forward on ``(..., C, H, W)`` activations."""
        shape = (-1, 1, 1)
        return (self.gamma.reshape(shape) * (y - self.mu.reshape(shape))
                / np.sqrt(self.sigma_sq.reshape(shape) + self.epsilon)
                + self.beta.reshape(shape))


def fold_bn(weights, bias, bn: BnParams, divide_by: str = "std"):
    """Absorb a BN layer into the preceding CONV's weights and bias.

    ``divide_by="std"`` (default) matches :meth:`BnParams.apply`, i.e. divides
    by ``sqrt(sigma_sq + eps)``.  ``divide_by="var"`` reproduces the literal
    variance-division form some toolchains quote; it is not equivalent to
    the BN forward used here and is only provided for comparison.
    """
    weights = np.asarray(weights)
    bias = np.asarray(bias)
    oc = weights.shape[0]
    if not (bias.shape == (oc,) and all(np.shape(v) == (oc,) for v in
                                        (bn.mu, bn.sigma_sq, bn.gamma, bn.beta))):
        raise DimensionError("BN parameters and conv output channels disagree")
    if divide_by == "std":
        denom = np.sqrt(bn.sigma_sq + bn.epsilon)
    elif divide_by == "var":
        denom = np.asarray(bn.sigma_sq, dtype=np.float64)
    else:
        raise ValueError(f"unknown divide_by {divide_by!r}")
    factor = bn.gamma / denom
    w_hat = weights * factor.reshape((-1,) + (1,) * (weights.ndim - 1))
    b_hat = factor * (bias - bn.mu) + bn.beta
    return w_hat, b_hat


# ---------------------------------------------------------------------------
# FLOP accounting

def layer_flops(layer: LayerSpec, in_h: int, in_w: int) -> int:
    """FLOPs of one CONV/TCONV layer, one MAC counted as two FLOPs.

    For a TCONV the MAC count is that of its GEMM, i.e. every input pixel
    contributes ``k*k*out_c`` products per input channel.  Bias adds and
    activations are not counted; a shortcut addition adds one FLOP per
    output element.
    """
    if layer.kind == CONV:
        oh, ow = layer.out_hw(in_h, in_w)
        macs = layer.in_channels * layer.filter ** 2 * oh * ow * layer.out_channels
    elif layer.kind == TCONV:
        macs = layer.in_channels * layer.filter ** 2 * in_h * in_w * layer.out_channels
    else:
        return 0
    flops = 2 * macs
    if layer.skip_partner is not None:
        oh, ow = layer.out_hw(in_h, in_w)
        flops += layer.out_channels * oh * ow
    return flops


def count_flops(spec: ArchSpec, input_dims) -> int:
    """FLOPs per inference for ``spec`` on images of ``input_dims = (H, W)``."""
    spec.validate()
    layers = arch_layers(spec)
    h, w = padded_dims(input_dims, spec.scale, layers)
    total = 0
    for layer in layers:
        total += layer_flops(layer, h, w)
        h, w = layer.out_hw(h, w)
    return total
