"""Builders shared by several test modules."""

import numpy as np

from irisfcn.fcn import (CONV, SOFTMAX, TCONV, ArchSpec, LayerSpec, Network,
                         build_arch, init_params)


def make_net(layers, seed=0, bias_std=0.1, dtype=np.float64):
    params = init_params(layers, seed, dtype)
    rng = np.random.default_rng(seed + 1)
    params = [None if p is None else (p[0], rng.normal(0, bias_std, p[1].shape).astype(dtype))
              for p in params]
    return Network(layers, params)


def head():
    return [LayerSpec(CONV, 1, 1, 0, 3, 2, relu=False), LayerSpec(SOFTMAX, 0, 1, 0, 2, 2, False)]


def conv_only():
    return make_net([LayerSpec(CONV, 3, 1, 1, 1, 3)] + head())


def skip_net():
    """CONV -> strided CONV -> TCONV (+ shortcut from layer 0) -> 1x1 head."""
    return make_net([LayerSpec(CONV, 3, 1, 1, 1, 3), LayerSpec(CONV, 3, 2, 1, 3, 4),
                     LayerSpec(TCONV, 4, 2, 1, 4, 3, skip_partner=0)] + head())


def small_arch(seed=3):
    return build_arch(ArchSpec.parse("0-1-4-1-0", 0.25, 4), seed=seed)


# (network, spatial size) triples used by gradient checks
def gradient_toys():
    return [(conv_only(), 6), (skip_net(), 8), (small_arch(), 16)]


def annulus(h, w, cx, cy, r_out, r_in):
    yy, xx = np.mgrid[0:h, 0:w]
    d = np.hypot(xx - cx, yy - cy)
    return (d <= r_out) & (d > r_in)


def disk(h, w, cx, cy, r):
    yy, xx = np.mgrid[0:h, 0:w]
    return np.hypot(xx - cx, yy - cy) <= r
