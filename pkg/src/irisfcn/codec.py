"""Rubber-sheet normalisation, log-Gabor phase encoding and Hamming matching."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .contour import EyeGeometry
from .errors import DimensionError, GeometryError, IncomparableCodes, ValidationError

RADIAL_RES = 16
ANGULAR_RES = 128
MAX_SHIFT = 12  # 12 * 360/128 = 33.75 degrees, the largest sweep inside +/-35
MAG_THRESHOLD = 1e-6


@dataclass
class NormalizedGrid:
    values: np.ndarray  # (radial, angular) float in [0, 1]
    valid: np.ndarray   # (radial, angular) bool


@dataclass
class GaborParams:
    wavelength: float = 18.0     # centre wavelength in angular samples
    sigma_over_f: float = 0.5

    def __post_init__(self):
        if self.wavelength < 2:
            raise ValidationError("centre wavelength must be at least 2 samples")
        if not 0 < self.sigma_over_f < 1:
            raise ValidationError("sigma_over_f must lie in (0, 1)")


@dataclass
class IrisCode:
    """Phase bits and validity bits, both ``(16, 256)`` booleans.

    Column ``2*j`` holds the real-part bit of angular sample ``j`` and column
    ``2*j + 1`` its imaginary-part bit.
    """

    code: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.code = np.asarray(self.code, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.code.shape != self.mask.shape or self.code.ndim != 2:
            raise DimensionError(f"code {self.code.shape} and mask {self.mask.shape} differ")

    def rotated(self, shift: int) -> "IrisCode":
        """Circular shift by ``shift`` angular samples (two bits per sample)."""
        return IrisCode(np.roll(self.code, 2 * shift, axis=1),
                        np.roll(self.mask, 2 * shift, axis=1))

    def __eq__(self, other):
        return (isinstance(other, IrisCode) and np.array_equal(self.code, other.code)
                and np.array_equal(self.mask, other.mask))


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray):
    h, w = img.shape
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(np.int64), w - 2 if w > 1 else 0)
    y0 = np.minimum(np.floor(yc).astype(np.int64), h - 2 if h > 1 else 0)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = xc - x0, yc - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy, inside


def rubber_sheet(image: np.ndarray, geometry: EyeGeometry, seg_mask: np.ndarray | None = None,
                 radial_res: int = RADIAL_RES, angular_res: int = ANGULAR_RES) -> NormalizedGrid:
    """Unwrap the annulus between pupil and iris circles onto a fixed grid.

    Sample ``(i, j)`` lies at radial fraction ``(i + 0.5) / radial_res`` on the
    straight segment joining the pupil and iris boundary points at angle
    ``2*pi*j / angular_res``.  Intensities are bilinearly interpolated (8-bit
    images are scaled to [0, 1]); a sample is valid when it falls inside the
    image and inside ``seg_mask``.
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise DimensionError(f"expected a 2-D image, got {img.shape}")
    img = img.astype(np.float64) / 255.0 if img.dtype.kind in "ui" else img.astype(np.float64)
    iris, pupil = geometry.iris, geometry.pupil
    if pupil.r <= 0 or iris.r <= 0 or \
            math.hypot(pupil.cx - iris.cx, pupil.cy - iris.cy) + pupil.r >= iris.r:
        raise GeometryError("pupil circle must lie strictly inside the iris circle")
    rho = (np.arange(radial_res) + 0.5) / radial_res
    theta = 2 * np.pi * np.arange(angular_res) / angular_res
    c, s = np.cos(theta), np.sin(theta)
    px, py = pupil.cx + pupil.r * c, pupil.cy + pupil.r * s
    ix, iy = iris.cx + iris.r * c, iris.cy + iris.r * s
    x = (1 - rho)[:, None] * px[None, :] + rho[:, None] * ix[None, :]
    y = (1 - rho)[:, None] * py[None, :] + rho[:, None] * iy[None, :]
    values, inside = _bilinear(img, x, y)
    valid = inside.copy()
    if seg_mask is not None:
        m = np.asarray(seg_mask).astype(bool)
        if m.shape != img.shape:
            raise DimensionError(f"mask {m.shape} does not match image {img.shape}")
        xi = np.clip(np.rint(x).astype(np.int64), 0, m.shape[1] - 1)
        yi = np.clip(np.rint(y).astype(np.int64), 0, m.shape[0] - 1)
        valid &= m[yi, xi]
    return NormalizedGrid(np.clip(values, 0.0, 1.0), valid)


def log_gabor_transfer(n: int, params: GaborParams) -> np.ndarray:
    """One-sided log-Gabor frequency response for an ``n``-point DFT.

    Zero at DC and at all negative frequencies, so filtering yields an
    analytic (complex) signal.
    """
    f = np.fft.fftfreq(n)
    f0 = 1.0 / params.wavelength
    g = np.zeros(n)
    pos = f > 0
    g[pos] = np.exp(-(np.log(f[pos] / f0) ** 2) / (2 * np.log(params.sigma_over_f) ** 2))
    return g


def log_gabor_row(row: np.ndarray, params: GaborParams | None = None) -> np.ndarray:
    """Circularly filter one angular row; returns complex coefficients."""
    params = params or GaborParams()
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1:
        raise DimensionError("log_gabor_row expects a 1-D row")
    return np.fft.ifft(np.fft.fft(row) * log_gabor_transfer(row.size, params))


def encode(grid: NormalizedGrid, params: GaborParams | None = None) -> IrisCode:
    """Quantise log-Gabor phase into two bits per grid sample."""
    params = params or GaborParams()
    vals = np.asarray(grid.values, dtype=np.float64)
    g = log_gabor_transfer(vals.shape[1], params)
    resp = np.fft.ifft(np.fft.fft(vals, axis=1) * g[None, :], axis=1)
    rows, cols = vals.shape
    code = np.empty((rows, 2 * cols), dtype=bool)
    code[:, 0::2] = resp.real >= 0
    code[:, 1::2] = resp.imag >= 0
    good = np.asarray(grid.valid, dtype=bool) & (np.abs(resp) >= MAG_THRESHOLD)
    mask = np.repeat(good, 2, axis=1)
    return IrisCode(code, mask)


def hamming_counts(a: IrisCode, b: IrisCode):
    """``(differing jointly-valid bits, jointly-valid bits)``."""
    if a.code.shape != b.code.shape:
        raise DimensionError(f"code shapes differ: {a.code.shape} vs {b.code.shape}")
    joint = a.mask & b.mask
    return int(np.count_nonzero((a.code ^ b.code) & joint)), int(np.count_nonzero(joint))


def hamming(a: IrisCode, b: IrisCode) -> float:
    """Fraction of jointly valid bits on which the two codes disagree."""
    diff, total = hamming_counts(a, b)
    if total == 0:
        raise IncomparableCodes("the two masks share no valid bit")
    return diff / total


def rotation_order(max_shift: int = MAX_SHIFT):
    yield 0
    for s in range(1, max_shift + 1):
        yield -s
        yield s


def match_min_hd(probe: IrisCode, stored: IrisCode, max_shift: int = MAX_SHIFT):
    """Minimum Hamming distance over circular shifts of ``probe``.

    Returns ``(hd, shift)``; on ties the smallest ``|shift|`` wins, negative
    before positive.  Ratios are compared exactly as integer fractions.
    """
    best = None
    for s in rotation_order(max_shift):
        diff, total = hamming_counts(probe.rotated(s), stored)
        if total == 0:
            continue
        if best is None or diff * best[1] < best[0] * total:
            best = (diff, total, s)
    if best is None:
        raise IncomparableCodes("no rotation leaves a jointly valid bit")
    return best[0] / best[1], best[2]
