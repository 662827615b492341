"""Bit-exact functional model and tile/traffic estimator of a tiled GEMM engine.

The engine holds an 8x9 A buffer, a 9x224 B buffer and an 8x224 C buffer and
has nine multipliers feeding an adder tree, so each cycle it reduces one
9-wide slice of A against one column of B into one C element.  Tiles are
visited with K innermost, so each C tile is written back exactly once.

DFP jobs: int8 operands, 16-bit products, a full-precision adder tree, a
16-bit C buffer with saturating accumulation (initialised with the bias),
then a rounding shift to the output fractional length and 8-bit saturation.
Float jobs stay in float32 throughout.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError
from .fcn import Network, forward, segment_with
from .quant import QuantizedNetwork, quantize_input, quantized_forward
from .tensor import gemm_ref, gemm_ref_q, saturate, shift_round

FLOAT32 = "float32"
DFP8 = "dfp8"


@dataclass(frozen=True)
class TileConfig:
    a_rows: int = 8
    a_cols: int = 9
    b_rows: int = 9
    b_cols: int = 224
    c_rows: int = 8
    c_cols: int = 224
    multipliers: int = 9
    c_bits: int = 16

    def __post_init__(self):
        if not (self.a_cols == self.b_rows == self.multipliers):
            raise ValidationError("A columns, B rows and multiplier count must agree")
        if (self.c_rows, self.c_cols) != (self.a_rows, self.b_cols):
            raise ValidationError("C tile must be A rows x B columns")
        if min(self.a_rows, self.a_cols, self.b_cols) < 1:
            raise ValidationError("tile dims must be positive")
        if not 16 <= self.c_bits <= 62:
            raise ValidationError("C buffer width must lie in [16, 62] bits")


@dataclass(frozen=True)
class AccelJob:
    M: int
    K: int
    N: int
    element_kind: str = FLOAT32
    out_fl: int | None = None

    def __post_init__(self):
        if min(self.M, self.K, self.N) < 1:
            raise ValidationError(f"job dims must be >= 1, got {(self.M, self.K, self.N)}")
        if self.element_kind not in (FLOAT32, DFP8):
            raise ValidationError(f"unknown element kind {self.element_kind!r}")
        if self.element_kind == DFP8 and self.out_fl is None:
            raise ValidationError("dfp8 jobs need out_fl")


@dataclass
class GemmStats:
    """Counters from one or more accelerator GEMMs."""

    c_saturations: int = 0
    output_saturations: int = 0


def _ceil(a, b):
    return -(-a // b)


def accel_gemm(a, b, job: AccelJob, cfg: TileConfig = TileConfig(), a_fl: int = 0,
               b_fl: int = 0, bias=None, stats: GemmStats | None = None) -> np.ndarray:
    """Execute ``job`` the way the engine would.

    For DFP jobs ``a`` and ``b`` hold int8 codes at ``a_fl`` / ``b_fl`` and
    ``bias`` (optional, per row) sits at ``a_fl + b_fl``.  Element-wise
    arithmetic does not depend on the M/N tiling, so rows and columns are
    processed together while K advances one 9-wide step at a time, which
    is where the C-buffer saturation points lie.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != (job.M, job.K) or b.shape != (job.K, job.N):
        raise DimensionError(f"operands {a.shape} x {b.shape} do not match job "
                             f"{(job.M, job.K, job.N)}")
    step = cfg.a_cols
    if job.element_kind == FLOAT32:
        a32, b32 = a.astype(np.float32), b.astype(np.float32)
        c = np.zeros((job.M, job.N), dtype=np.float32)
        if bias is not None:
            c += np.asarray(bias, dtype=np.float32).reshape(-1, 1)
        for k0 in range(0, job.K, step):
            c += a32[:, k0:k0 + step] @ b32[k0:k0 + step]
        return c

    if not (np.issubdtype(a.dtype, np.integer) and np.issubdtype(b.dtype, np.integer)):
        raise ValidationError("dfp8 operands must be integer codes")
    lo, hi = -(1 << (cfg.c_bits - 1)), (1 << (cfg.c_bits - 1)) - 1
    a64, b64 = a.astype(np.int64), b.astype(np.int64)
    sat = 0
    c = np.zeros((job.M, job.N), dtype=np.int64)
    if bias is not None:
        init = np.broadcast_to(np.asarray(bias, dtype=np.int64).reshape(-1, 1), c.shape)
        sat += int(np.count_nonzero((init < lo) | (init > hi)))
        c = np.clip(init, lo, hi)
    for k0 in range(0, job.K, step):
        tree = a64[:, k0:k0 + step] @ b64[k0:k0 + step]
        c = c + tree
        over = (c < lo) | (c > hi)
        if over.any():
            sat += int(np.count_nonzero(over))
            c = np.clip(c, lo, hi)
    shifted = shift_round(c, a_fl + b_fl - job.out_fl)
    out = saturate(shifted)
    if stats is not None:
        stats.c_saturations += sat
        stats.output_saturations += int(np.count_nonzero(out != shifted))
    return out.astype(np.int8)


@dataclass
class Schedule:
    M: int
    K: int
    N: int
    tiles: int
    dma_transactions: int
    writebacks: int
    est_cycles: int
    layer: int | None = None
    kind: str | None = None
    saturations: int = 0

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def tile_schedule(job: AccelJob, cfg: TileConfig = TileConfig()) -> Schedule:
    """Closed-form tile counts, buffer traffic and an idealised cycle estimate.

    One DMA transaction moves one buffer row: each tile step fills the A
    rows and B rows it actually covers, and each write-back drains the C
    rows it covers.  Cycles are one per 9-MAC column step over full tiles
    (padded lanes are still clocked) plus one per DMA transaction.  This is
    a model for comparing schedules, not a timing claim about hardware.
    """
    mt, kt, nt = _ceil(job.M, cfg.a_rows), _ceil(job.K, cfg.a_cols), _ceil(job.N, cfg.b_cols)
    tiles = mt * kt * nt
    # row sums across all tiles of each axis collapse to the dim itself
    a_fills = job.M * kt * nt
    b_fills = job.K * mt * nt
    c_drains = job.M * nt
    dma = a_fills + b_fills + c_drains
    compute = tiles * cfg.c_rows * cfg.c_cols
    return Schedule(job.M, job.K, job.N, tiles, dma, mt * nt, compute + dma)


def enumerate_schedule(job: AccelJob, cfg: TileConfig = TileConfig()) -> Schedule:
    """Brute-force tile walk in engine order; must agree with :func:`tile_schedule`."""
    tiles = dma = writebacks = compute = 0
    for m0 in range(0, job.M, cfg.a_rows):
        rows = min(cfg.a_rows, job.M - m0)
        for n0 in range(0, job.N, cfg.b_cols):
            for k0 in range(0, job.K, cfg.a_cols):
                depth = min(cfg.a_cols, job.K - k0)
                tiles += 1
                dma += rows + depth
                compute += cfg.c_rows * cfg.c_cols
            writebacks += 1
            dma += rows
    return Schedule(job.M, job.K, job.N, tiles, dma, writebacks, compute + dma)


@dataclass
class AccelReport:
    """Per-GEMM schedules of one network run.

    ``backend`` is ``"accel"`` when GEMMs ran on the engine model and
    ``"ref"`` when they ran on the reference kernels; saturations are only
    modelled (and reported) for the former.
    """

    tile_config: TileConfig = field(default_factory=TileConfig)
    layers: list = field(default_factory=list)
    backend: str = "accel"

    @property
    def totals(self) -> dict:
        keys = ("tiles", "dma_transactions", "writebacks", "est_cycles")
        out = {k: sum(getattr(s, k) for s in self.layers) for k in keys}
        if self.backend == "accel":
            out["saturations"] = sum(s.saturations for s in self.layers)
        return out

    def to_dict(self) -> dict:
        layers = []
        for s in self.layers:
            d = s.to_dict()
            if self.backend != "accel":
                d.pop("saturations")
            layers.append(d)
        return {"backend": self.backend, "tile_config": asdict(self.tile_config),
                "layers": layers, "total": self.totals}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


class _Recorder:
    """GEMM callables that log one schedule per call.

    With ``backend="accel"`` the GEMM runs on the engine model; with
    ``"ref"`` it runs on the reference kernels and only the schedule is
    modelled.
    """

    def __init__(self, net, cfg: TileConfig, backend: str):
        if backend not in ("accel", "ref"):
            raise ValidationError(f"unknown backend {backend!r}")
        self.cfg = cfg
        self.report = AccelReport(cfg, backend=backend)
        # compute layers in execution order, matched to GEMM calls
        self.order = [(i, l.kind) for i, l in enumerate(net.layers) if l.kind != "SOFTMAX"]

    def _log(self, job, sat):
        i, kind = self.order[len(self.report.layers) % len(self.order)]
        s = tile_schedule(job, self.cfg)
        s.layer, s.kind, s.saturations = i, kind, sat
        self.report.layers.append(s)

    def dfp(self, a, b, a_fl, b_fl, out_fl, bias=None):
        job = AccelJob(a.shape[0], a.shape[1], b.shape[1], DFP8, out_fl)
        if self.report.backend == "ref":
            out = gemm_ref_q(a, b, a_fl, b_fl, out_fl, bias)
            self._log(job, 0)
            return out
        stats = GemmStats()
        out = accel_gemm(a, b, job, self.cfg, a_fl, b_fl, bias, stats)
        self._log(job, stats.c_saturations)
        return out

    def float(self, a, b):
        job = AccelJob(a.shape[0], a.shape[1], b.shape[1], FLOAT32)
        out = gemm_ref(a, b) if self.report.backend == "ref" else accel_gemm(a, b, job, self.cfg)
        self._log(job, 0)
        return out


def run_network_on_accel(net, image, cfg: TileConfig = TileConfig(), backend: str = "accel"):
    """Segment ``image`` with every GEMM routed through the schedule recorder.

    Accepts a float :class:`Network` or a :class:`QuantizedNetwork`;
    returns ``(mask, AccelReport)``.  ``backend="ref"`` computes with the
    reference kernels, which gives the same mask as the plain inference
    functions and a schedule for the same GEMM shapes.
    """
    rec = _Recorder(net, cfg, backend)
    if isinstance(net, QuantizedNetwork):
        def run(x):
            return quantized_forward(net, quantize_input(x, net.input_fl), rec.dfp)
    elif isinstance(net, Network):
        def run(x):
            return forward(net, x[None].astype(np.float32), matmul=rec.float)[0]
    else:
        raise ValidationError(f"cannot run {type(net).__name__} on the accelerator")
    mask = segment_with(net, image, run)
    return mask, rec.report
