"""Acceptance criteria 1-8, one test each, each printing a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from conftest import record
from helpers import annulus, gradient_toys, small_arch
from irisfcn.accel import DFP8, AccelJob, GemmStats, accel_gemm, enumerate_schedule, tile_schedule
from irisfcn.codec import IrisCode, encode, hamming, match_min_hd, rubber_sheet
from irisfcn.contour import fit_contours
from irisfcn.evaluation import all_pairs, e1, e2, eer, seg_metrics, summary
from irisfcn.fcn import CONV, SOFTMAX, ArchSpec, BnParams, Network, build_arch, conv_forward, \
    count_flops, fold_bn, forward, infer, tconv_forward
from irisfcn.quant import quantize, quantized_infer
from irisfcn.synth import SyntheticEyeSpec, render_eye
from irisfcn.tensor import gemm_ref_q
from irisfcn.train import LossParams, TrainConfig, gradient_check, train

# name, scale, N, architecture, (W, H), published GFLOPs
PUBLISHED_GFLOPS = [
    ("FCN9", 1.0, 16, "0-1-2-3-4-3-2-1-0", (320, 240), 1.791),
    ("FCN10", 1.0, 8, "0-1-2-3-4-3-2-1-0", (320, 240), 0.453),
    ("FCN11", 1.0, 6, "0-1-2-3-4-3-2-1-0", (320, 240), 0.335),
    ("FCN12", 1.0, 4, "0-1-2-3-4-3-2-1-0", (320, 240), 0.154),
    ("FCN13", 1.0, 4, "0-1-2-4-2-1-0", (320, 240), 0.117),
    ("FCN14", 0.5, 8, "0-1-2-4-2-1-0", (320, 240), 0.054),
    ("FCN15", 0.5, 4, "0-1-2-4-2-1-0", (320, 240), 0.038),
    ("FCN16", 0.25, 8, "0-1-4-1-0", (320, 240), 0.014),
    ("FCN0", 1.0, 12, "0-1-2-3-4-3-2-1-0", (320, 280), 1.143),
]


def test_criterion_1_flop_accounting():
    t0 = time.perf_counter()
    ours, off = {}, []
    for name, scale, n, arch, (w, h), published in PUBLISHED_GFLOPS:
        ours[name] = count_flops(ArchSpec.parse(arch, scale, n), (h, w)) / 1e9
        if abs(ours[name] / published - 1) > 0.25:
            off.append(f"{name} {ours[name]:.3f} vs {published}")
    by_ours = sorted(ours, key=ours.get)
    by_published = sorted(ours, key=lambda k: next(r[5] for r in PUBLISHED_GFLOPS if r[0] == k))
    ordered = by_ours == by_published
    elapsed = time.perf_counter() - t0
    ok = record(1, not off and ordered and elapsed < 1,
                f"outside 25%: {off or 'none'}; ordering {'kept' if ordered else 'differs'}; "
                f"{elapsed:.2f}s")
    assert ok


def test_criterion_2_gradient_check():
    t0 = time.perf_counter()
    worst = []
    for i, (net, size) in enumerate(gradient_toys()):
        rng = np.random.default_rng(i)
        x = rng.random((2, 1, size, size))
        y = rng.random((2, size, size)) > 0.6
        res = gradient_check(net, x, y, LossParams(0.4), samples=100, seed=i)
        worst.append(max(r[-1] for r in res))
    elapsed = time.perf_counter() - t0
    ok = record(2, max(worst) < 1e-4 and elapsed < 60,
                f"max relative errors {[f'{w:.1e}' for w in worst]}; {elapsed:.1f}s")
    assert ok


def _forward_with_bn(net, bns, x):
    """Reference forward that applies each CONV's batch norm before its ReLU."""
    outs, h = [], x
    for i, layer in enumerate(net.layers):
        if layer.kind == SOFTMAX:
            outs.append(h)
            continue
        w, b = net.params[i]
        if layer.kind == CONV:
            z = conv_forward(h, w, b, layer.stride, layer.padding)[0]
            z = np.stack([bns[i].apply(zz) for zz in z])
        else:
            z = tconv_forward(h, w, b, layer.stride, layer.padding)[0]
        a = np.maximum(z, 0) if layer.relu else z
        if layer.skip_partner is not None:
            a = a + outs[layer.skip_partner]
        outs.append(a)
        h = a
    return h


def test_criterion_3_bn_folding():
    rng = np.random.default_rng(0)
    worst = 0.0
    for draw in range(100):
        net = small_arch(seed=draw)
        net = Network(net.layers, [None if p is None else (p[0].astype(np.float64),
                                                           rng.normal(0, 0.1, p[1].shape))
                                   for p in net.params], net.scale)
        bns, folded = {}, []
        for i, (layer, p) in enumerate(zip(net.layers, net.params)):
            if layer.kind == CONV:
                c = layer.out_channels
                bns[i] = BnParams(rng.normal(0, 0.5, c), rng.uniform(0.2, 3.0, c),
                                  rng.uniform(0.5, 1.5, c), rng.normal(0, 0.2, c), 1e-5)
                folded.append(fold_bn(p[0], p[1], bns[i]))
            else:
                folded.append(p)
        x = rng.random((1, 1, 16, 16))
        ref = _forward_with_bn(net, bns, x)
        got = forward(Network(net.layers, folded, net.scale), x)
        worst = max(worst, float(np.abs(got - ref).max()))
    ok = record(3, worst < 1e-5, f"max |folded - unfolded| = {worst:.2e} over 100 draws")
    assert ok


def test_criterion_4_quantized_gemm_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    stats = GemmStats()
    mismatches = 0
    for _ in range(1000):
        m, k, n = (int(v) for v in rng.integers(1, 65, 3))
        bound = max(1, 32767 // (128 * k) - 1)
        a = rng.integers(-128, 128, (m, k))
        b = rng.integers(-bound, bound + 1, (k, n))
        a_fl, b_fl = int(rng.integers(0, 8)), int(rng.integers(0, 8))
        out_fl = int(rng.integers(-2, a_fl + b_fl + 1))
        got = accel_gemm(a, b, AccelJob(m, k, n, DFP8, out_fl), a_fl=a_fl, b_fl=b_fl, stats=stats)
        mismatches += not np.array_equal(got, gemm_ref_q(a, b, a_fl, b_fl, out_fl))
    tiles = {}
    for dims, want in (((16, 9, 76800), 686), ((32, 144, 19200), 5504)):
        job = AccelJob(*dims)
        s, e = tile_schedule(job), enumerate_schedule(job)
        tiles[dims] = (s.tiles, e.tiles, want)
    tiles_ok = all(a == b == c for a, b, c in tiles.values())
    elapsed = time.perf_counter() - t0
    ok = record(4, mismatches == 0 and stats.c_saturations == 0 and tiles_ok and elapsed < 60,
                f"{mismatches} mismatches / 1000 jobs, {stats.c_saturations} saturations; "
                f"tiles {list(tiles.values())}; {elapsed:.1f}s")
    assert ok


def _recognition(segment, samples):
    masks = {n: segment(s.image) for n, _, s in samples}
    held_out = [seg_metrics(masks[n], s.mask).f for n, _, s in samples if int(n[-1]) >= 3]
    gallery = []
    for n, ident, s in samples:
        g = fit_contours(masks[n])
        gallery.append((n, ident, encode(rubber_sheet(s.image, g, masks[n]))))
    return float(np.mean(held_out)), summary(all_pairs(gallery))


@pytest.mark.slow
def test_criterion_5_end_to_end_synthetic_recognition():
    t0 = time.perf_counter()
    size = 256
    spec = SyntheticEyeSpec(height=size, width=size, iris_radius_min=68.0, iris_radius_max=84.0,
                            center_jitter=12.0)
    eyes = [[render_eye(spec, i, k) for k in range(5)] for i in range(10)]
    train_set = [(s.image, s.mask) for row in eyes for s in row[:3]]
    samples = [(f"id{i}_{k}", str(i), s) for i, row in enumerate(eyes) for k, s in enumerate(row)]
    net = build_arch(ArchSpec.parse("0-1-2-4-2-1-0", 0.5, 8), input_dims=(size, size), seed=0)
    result = train(net, train_set, TrainConfig(learning_rate=0.05, epochs=50, batch_size=4))
    f_float, s_float = _recognition(lambda im: infer(result.net, im), samples)
    qnet = quantize(result.net, [im for im, _ in train_set], 16, 0)
    f_dfp, s_dfp = _recognition(lambda im: quantized_infer(qnet, im), samples)
    drop = 100 * (f_float - f_dfp)
    elapsed = time.perf_counter() - t0
    checks = [f_float >= 0.95,
              s_float["max_genuine_hd"] < s_float["min_impostor_hd"] and s_float["EER"] == 0,
              drop <= 2.0,
              s_dfp["max_genuine_hd"] < s_dfp["min_impostor_hd"] and s_dfp["EER"] == 0,
              elapsed < 900]
    ok = record(5, all(checks),
                f"float F {f_float:.4f}, EER {s_float['EER']}, genuine max "
                f"{s_float['max_genuine_hd']:.3f} < impostor min {s_float['min_impostor_hd']:.3f}; "
                f"DFP F {f_dfp:.4f} (drop {drop:.2f} pts), EER {s_dfp['EER']}; {elapsed:.0f}s")
    assert ok


def test_criterion_6_contour_fitting_oracle():
    rng = np.random.default_rng(0)
    worst_c = worst_r = 0.0
    violations = 0
    for _ in range(100):
        r = rng.uniform(30, 70)
        pr = r * rng.uniform(0.2, 0.6)
        cx, cy = rng.uniform(r + 5, 195 - r), rng.uniform(r + 5, 195 - r)
        mask = annulus(200, 200, cx, cy, r, pr) ^ (rng.random((200, 200)) < rng.uniform(0, 0.05))
        g = fit_contours(mask)
        worst_c = max(worst_c, math.hypot(g.iris.cx - cx, g.iris.cy - cy))
        worst_r = max(worst_r, abs(g.iris.r - r))
        if not g.pupil_fallback and not 0.1 * g.iris.r <= g.pupil.r <= 0.8 * g.iris.r:
            violations += 1
    ok = record(6, worst_c <= 2 and worst_r <= 3 and violations == 0,
                f"worst centre error {worst_c:.2f}px, worst radius error {worst_r:.2f}px, "
                f"{violations} unflagged pupil violations")
    assert ok


def _sweep_eer(gen, imp):
    pts = [(0.0, 1.0)] + [(sum(s <= t for s in imp) / len(imp), sum(s > t for s in gen) / len(gen))
                          for t in sorted(set(gen) | set(imp))]
    for (fa0, fr0), (fa1, fr1) in zip(pts, pts[1:]):
        if fa1 >= fr1:
            return fa0 if fa0 >= fr0 else fa0 + (fr0 - fa0) / ((fa1 - fr1) - (fa0 - fr0)) * (fa1 - fa0)


def test_criterion_7_matching_identities():
    a = IrisCode([[1, 0, 1, 1, 0, 0, 1, 0]], [[1, 1, 1, 1, 1, 1, 0, 0]])
    b = IrisCode([[1, 1, 1, 0, 0, 0, 0, 1]], [[1, 1, 1, 1, 1, 1, 1, 1]])
    full = IrisCode([[1, 0, 1, 1, 0, 0, 1, 0]], np.ones((1, 8)))
    toys = [hamming(a, b) == 1 / 3, hamming(full, full) == 0,
            hamming(full, IrisCode(~full.code, full.mask)) == 1]
    rng = np.random.default_rng(0)
    code = IrisCode(rng.random((16, 256)) < 0.5, rng.random((16, 256)) < 0.9)
    rotations = all(match_min_hd(code.rotated(k), code)[0] == 0 for k in range(-12, 13))
    scores = np.round(rng.random(200), 4)
    gen, imp = list(scores[:80] * 0.7), list(scores[80:] * 0.7 + 0.2)
    diff = abs(eer((gen, imp)) - _sweep_eer(gen, imp))
    ok = record(7, all(toys) and rotations and diff <= 1e-9,
                f"toy cases {sum(toys)}/3 exact; rotations |k|<=12 give 0: {rotations}; "
                f"EER vs sweep diff {diff:.1e}")
    assert ok


def test_criterion_8_metric_formulas():
    gt = np.zeros((4, 4), bool)
    gt[0, :2] = True
    sup = gt.copy()
    sup[1, :2] = True
    dis = np.zeros((4, 4), bool)
    dis[3, 3] = True
    cases = []
    s = seg_metrics(gt, gt)
    cases += [(s.precision, 1.0), (s.recall, 1.0), (s.f, 1.0)]
    s = seg_metrics(sup, gt)
    cases += [(s.precision, 0.5), (s.recall, 1.0), (s.f, 2 / 3)]
    s = seg_metrics(dis, gt)
    cases += [(s.precision, 0.0), (s.recall, 0.0), (s.f, 0.0)]
    m1 = np.array([[1, 0], [0, 0]], bool)
    m2 = np.array([[1, 1], [0, 0]], bool)
    cases += [(e1(gt, gt), 0.0), (e1(m1, m2), 0.25), (e2([0.1], [0.3]), 0.2)]
    worst = max(abs(got - want) for got, want in cases)
    ok = record(8, worst <= 1e-12, f"{len(cases)} hand-computed values, max error {worst:.1e}")
    assert ok
