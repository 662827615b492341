import json

import numpy as np
import pytest

from helpers import make_net, small_arch
from irisfcn.accel import (DFP8, FLOAT32, AccelJob, GemmStats, TileConfig, accel_gemm,
                           enumerate_schedule, run_network_on_accel, tile_schedule)
from irisfcn.errors import DimensionError, ValidationError
from irisfcn.fcn import CONV, SOFTMAX, LayerSpec, infer
from irisfcn.quant import DfpParams, quantize, quantize_network, quantized_infer
from irisfcn.tensor import gemm_ref, gemm_ref_q


def random_dfp_job(rng, cfg=TileConfig()):
    m, k, n = (int(v) for v in rng.integers(1, 65, 3))
    # keep every partial sum inside the 16-bit C buffer
    bound = max(1, (2 ** (cfg.c_bits - 1) - 1) // (128 * k) - 1)
    a = rng.integers(-128, 128, (m, k))
    b = rng.integers(-bound, bound + 1, (k, n))
    a_fl, b_fl = int(rng.integers(0, 8)), int(rng.integers(0, 8))
    out_fl = int(rng.integers(-2, a_fl + b_fl + 1))
    return a, b, a_fl, b_fl, out_fl, AccelJob(m, k, n, DFP8, out_fl)


def test_identity_passes_b_through(rng):
    a = np.zeros((8, 9), dtype=np.int64)
    a[:, :8] = np.eye(8, dtype=np.int64)
    b = rng.integers(-128, 128, (9, 300))
    out = accel_gemm(a, b, AccelJob(8, 9, 300, DFP8, 0))
    np.testing.assert_array_equal(out, b[:8])
    fa = np.eye(8, 9)
    fb = rng.normal(size=(9, 50))
    np.testing.assert_array_equal(accel_gemm(fa, fb, AccelJob(8, 9, 50)), fb[:8].astype(np.float32))


def test_dfp_jobs_match_reference_bit_exactly():
    rng = np.random.default_rng(0)
    stats = GemmStats()
    for _ in range(200):
        a, b, a_fl, b_fl, out_fl, job = random_dfp_job(rng)
        bias = rng.integers(-1000, 1001, job.M)
        got = accel_gemm(a, b, job, a_fl=a_fl, b_fl=b_fl, bias=bias, stats=stats)
        np.testing.assert_array_equal(got, gemm_ref_q(a, b, a_fl, b_fl, out_fl, bias))
    assert stats.c_saturations == 0


def test_float_job_close_to_reference(rng):
    a = rng.normal(size=(20, 50)).astype(np.float32)
    b = rng.normal(size=(50, 70)).astype(np.float32)
    ref = gemm_ref(a, b)
    got = accel_gemm(a, b, AccelJob(20, 50, 70, FLOAT32))
    assert np.abs(got - ref).max() <= 1e-4 * np.abs(ref).max()


def test_c_buffer_saturates_and_counts():
    a = np.full((1, 18), 127)
    b = np.full((18, 1), 127)
    job = AccelJob(1, 18, 1, DFP8, 0)
    stats = GemmStats()
    out = accel_gemm(a, b, job, stats=stats)
    # 9*127*127 = 145161 overflows 16 bits at the first K step and again at the second
    assert stats.c_saturations == 2
    assert stats.output_saturations == 1 and out[0, 0] == 127
    wide = GemmStats()
    accel_gemm(a, b, job, TileConfig(c_bits=32), stats=wide)
    assert wide.c_saturations == 0


def test_zero_padding_is_neutral(rng):
    a = rng.integers(-5, 6, (3, 4))
    b = rng.integers(-5, 6, (4, 5))
    ap = np.zeros((3, 9), dtype=np.int64)
    ap[:, :4] = a
    bp = np.zeros((9, 5), dtype=np.int64)
    bp[:4] = b
    np.testing.assert_array_equal(accel_gemm(a, b, AccelJob(3, 4, 5, DFP8, 0)),
                                  accel_gemm(ap, bp, AccelJob(3, 9, 5, DFP8, 0)))


def test_job_and_config_validation(rng):
    with pytest.raises(ValidationError):
        AccelJob(0, 1, 1)
    with pytest.raises(ValidationError):
        AccelJob(1, 1, 1, DFP8)
    with pytest.raises(ValidationError):
        AccelJob(1, 1, 1, "int4")
    with pytest.raises(ValidationError):
        TileConfig(a_cols=8)
    with pytest.raises(DimensionError):
        accel_gemm(np.zeros((2, 3)), np.zeros((4, 2)), AccelJob(2, 3, 2))
    with pytest.raises(ValidationError):
        accel_gemm(np.zeros((2, 3)), np.zeros((3, 2)), AccelJob(2, 3, 2, DFP8, 0))


@pytest.mark.parametrize("dims,tiles,writebacks", [
    ((16, 9, 76800), 686, 686), ((32, 144, 19200), 5504, 344), ((8, 9, 224), 1, 1),
])
def test_schedule_counts(dims, tiles, writebacks):
    s = tile_schedule(AccelJob(*dims))
    assert (s.tiles, s.writebacks) == (tiles, writebacks)


def test_single_tile_schedule_costs():
    s = tile_schedule(AccelJob(8, 9, 224))
    assert s.dma_transactions == 8 + 9 + 8
    assert s.est_cycles == 8 * 224 + 25


def test_schedule_matches_enumerator(rng):
    for _ in range(50):
        job = AccelJob(*(int(v) for v in rng.integers(1, 500, 3)))
        assert tile_schedule(job) == enumerate_schedule(job)


def _toy_qnet():
    rng = np.random.default_rng(3)
    layers = [LayerSpec(CONV, 3, 1, 1, 1, 4), LayerSpec(CONV, 1, 1, 0, 4, 2, relu=False),
              LayerSpec(SOFTMAX, 0, 1, 0, 2, 2, False)]
    net = make_net(layers, seed=3, dtype=np.float32)
    net.params[0] = (rng.integers(-8, 9, (4, 1, 3, 3)).astype(np.float32) / 16,
                     np.array([-0.5, -0.25, 0.25, 0.0], np.float32))
    params = [DfpParams(w_fl=4, a_in=6, a_out=5), DfpParams(w_fl=6, a_in=5, a_out=4), None]
    return net, quantize_network(net, params)


def test_dfp_network_on_accel_matches_quantized_infer():
    _, q = _toy_qnet()
    img = np.random.default_rng(4).integers(0, 256, (30, 26), dtype=np.uint8)
    mask, report = run_network_on_accel(q, img)
    np.testing.assert_array_equal(mask, quantized_infer(q, img))
    assert report.totals["saturations"] == 0
    assert [s.layer for s in report.layers] == [0, 1]


def test_float_network_on_accel_matches_infer():
    net = small_arch()
    img = np.random.default_rng(5).integers(0, 256, (64, 48), dtype=np.uint8)
    mask, report = run_network_on_accel(net, img)
    np.testing.assert_array_equal(mask, infer(net, img))
    assert sum(s.tiles for s in report.layers) == report.totals["tiles"]


def test_report_json_layout():
    _, q = _toy_qnet()
    _, report = run_network_on_accel(q, np.zeros((16, 16), np.uint8), backend="ref")
    data = json.loads(report.to_json())
    assert data["backend"] == "ref" and "saturations" not in data["total"]
    assert data["tile_config"]["b_cols"] == 224
    assert data["total"]["tiles"] == sum(l["tiles"] for l in data["layers"])
    with pytest.raises(ValidationError):
        run_network_on_accel(q, np.zeros((16, 16), np.uint8), backend="gpu")


def test_wide_c_buffer_reproduces_reference_on_trained_scale_net():
    net = small_arch()
    imgs = [np.random.default_rng(s).integers(0, 256, (64, 64), dtype=np.uint8) for s in range(3)]
    q = quantize(net, imgs)
    mask, report = run_network_on_accel(q, imgs[0], TileConfig(c_bits=32))
    np.testing.assert_array_equal(mask, quantized_infer(q, imgs[0]))
    assert report.totals["saturations"] == 0
