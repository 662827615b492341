"""Iris and pupil circle fitting from a binary segmentation mask.

Rough estimate from the largest blob's moments, refined by a circular Hough
transform over mask boundary pixels; the pupil is then searched with a
second Hough pass over the blob's inner boundary near the iris centre.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .errors import NoCircleFound, NoIrisFound, ValidationError

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass
class Blob:
    pixel_count: int
    centroid: tuple  # (x, y)
    major_axis_len: float
    minor_axis_len: float
    bbox: tuple  # (x0, y0, x1, y1) inclusive
    pixels: np.ndarray = field(repr=False, default=None)  # boolean mask of the blob


@dataclass
class Circle:
    cx: float
    cy: float
    r: float


@dataclass
class EyeGeometry:
    iris: Circle
    pupil: Circle
    pupil_fallback: bool = False

    def to_dict(self) -> dict:
        return {"iris": {"cx": self.iris.cx, "cy": self.iris.cy, "r": self.iris.r},
                "pupil": {"cx": self.pupil.cx, "cy": self.pupil.cy, "r": self.pupil.r},
                "pupil_fallback": bool(self.pupil_fallback)}

    @classmethod
    def from_dict(cls, d: dict) -> "EyeGeometry":
        try:
            return cls(Circle(float(d["iris"]["cx"]), float(d["iris"]["cy"]),
                              float(d["iris"]["r"])),
                       Circle(float(d["pupil"]["cx"]), float(d["pupil"]["cy"]),
                              float(d["pupil"]["r"])),
                       bool(d.get("pupil_fallback", False)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed geometry record: {exc}") from None


@dataclass
class ContourConfig:
    """Tunable windows for the Hough refinement stages."""

    iris_radius_window: float = 0.15   # +/- fraction of the rough radius
    iris_roi_fraction: float = 0.10    # +/- fraction of image dims around rough centre
    pupil_ratio_min: float = 0.1
    pupil_ratio_max: float = 0.8
    pupil_roi_fraction: float = 0.25   # +/- fraction of the iris radius
    fallback_ratio: float = 0.3
    fill_holes: bool = True


def blob_from_pixels(pixels: np.ndarray) -> Blob:
    """Centroid and equivalent-ellipse axis lengths of a boolean region.

    Second central moments are normalised by the pixel count and carry the
    +1/12 uniform-pixel correction on the diagonal terms, so a single pixel
    has axis lengths 4/sqrt(12) rather than 0.
    """
    ys, xs = np.nonzero(pixels)
    n = xs.size
    if n == 0:
        raise NoIrisFound("empty region")
    xc, yc = xs.mean(), ys.mean()
    dx, dy = xs - xc, ys - yc
    mu20 = (dx * dx).mean() + 1.0 / 12
    mu02 = (dy * dy).mean() + 1.0 / 12
    mu11 = (dx * dy).mean()
    common = math.sqrt(((mu20 - mu02) / 2) ** 2 + mu11 ** 2)
    lam1 = (mu20 + mu02) / 2 + common
    lam2 = max((mu20 + mu02) / 2 - common, 0.0)
    return Blob(int(n), (float(xc), float(yc)), 4 * math.sqrt(lam1), 4 * math.sqrt(lam2),
                (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())), pixels)


def largest_component(mask: np.ndarray) -> Blob:
    """Largest 8-connected foreground component (ties: first in raster order)."""
    mask = np.asarray(mask).astype(bool)
    labels, count = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if count == 0:
        raise NoIrisFound("mask contains no iris pixels")
    sizes = np.bincount(labels.ravel())[1:]
    # labels are assigned in raster order, so argmax breaks ties by first occurrence
    best = int(np.argmax(sizes)) + 1
    return blob_from_pixels(labels == best)


def rough_iris(blob: Blob):
    """Centre = centroid; radius = half the mean of the two axis lengths."""
    if blob.pixel_count == 0:
        raise NoIrisFound("empty blob")
    return blob.centroid, (blob.major_axis_len + blob.minor_axis_len) / 4


@lru_cache(maxsize=512)
def circle_offsets(r: int) -> np.ndarray:
    """Unique integer (dx, dy) offsets of a midpoint (Bresenham) circle."""
    if r == 0:
        return np.zeros((1, 2), dtype=np.int64)
    pts = set()
    x, y, err = r, 0, 1 - r
    while x >= y:
        for a, b in ((x, y), (y, x)):
            pts.update({(a, b), (-a, b), (a, -b), (-a, -b)})
        y += 1
        if err < 0:
            err += 2 * y + 1
        else:
            x -= 1
            err += 2 * (y - x) + 1
    out = np.array(sorted(pts), dtype=np.int64)
    out.setflags(write=False)
    return out


def cht(edges: np.ndarray, radius_range, center_roi=None):
    """Circular Hough transform restricted to a centre ROI and radius range.

    ``radius_range`` is an inclusive ``(r_min, r_max)`` pair of integers and
    ``center_roi`` an inclusive ``(x0, y0, x1, y1)`` box (defaults to the
    image).  Every edge pixel votes once for each hypothesis ``(cx, cy, r)``
    whose rasterised circle passes through it.  Returns
    ``((cx, cy), r, votes)`` for the global maximum, ties going to the
    smallest radius and then the first centre in row-major order.
    """
    edges = np.asarray(edges).astype(bool)
    h, w = edges.shape
    r_min, r_max = int(math.ceil(radius_range[0])), int(math.floor(radius_range[1]))
    r_min = max(r_min, 1)
    if r_max < r_min:
        raise ValidationError(f"empty radius range {radius_range}")
    if center_roi is None:
        x0, y0, x1, y1 = 0, 0, w - 1, h - 1
    else:
        x0, y0, x1, y1 = (int(round(v)) for v in center_roi)
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, w - 1), min(y1, h - 1)
        if x1 < x0 or y1 < y0:
            raise ValidationError(f"centre ROI {center_roi} lies outside the image")
    ey, ex = np.nonzero(edges)
    if ex.size == 0:
        raise NoCircleFound("edge map is empty")
    rw, rh = x1 - x0 + 1, y1 - y0 + 1
    best = (0, None, None)
    for r in range(r_min, r_max + 1):
        off = circle_offsets(r)
        cx = (ex[:, None] - off[None, :, 0]).ravel()
        cy = (ey[:, None] - off[None, :, 1]).ravel()
        keep = (cx >= x0) & (cx <= x1) & (cy >= y0) & (cy <= y1)
        if not keep.any():
            continue
        flat = (cy[keep] - y0) * rw + (cx[keep] - x0)
        acc = np.bincount(flat, minlength=rw * rh)
        idx = int(np.argmax(acc))
        votes = int(acc[idx])
        if votes > best[0]:
            best = (votes, (x0 + idx % rw, y0 + idx // rw), r)
    if best[0] == 0:
        raise NoCircleFound("no circle hypothesis received a vote")
    votes, center, r = best
    return center, r, votes


def boundary_edges(mask: np.ndarray):
    """Largest blob, its hole-filled version, and its outer boundary pixels.

    A boundary pixel is a blob pixel with at least one 4-neighbour outside
    the blob (pixels beyond the image border count as outside).  Outer
    boundary pixels face the region outside the hole-filled blob.
    """
    comp = largest_component(mask)
    blob = comp.pixels
    filled = ndimage.binary_fill_holes(blob)
    outer = blob & _touches(np.pad(~filled, 1, constant_values=True))
    boundary = blob & _touches(np.pad(~blob, 1, constant_values=True))
    return comp, filled, outer, boundary


def _touches(padded):
    return padded[:-2, 1:-1] | padded[2:, 1:-1] | padded[1:-1, :-2] | padded[1:-1, 2:]


def inner_edges(boundary: np.ndarray, iris: Circle, reach: float) -> np.ndarray:
    """Boundary pixels lying strictly within ``reach * r`` of the iris centre.

    These are the blob's pupil-side boundary; unlike hole boundaries they
    survive a pupil that an eyelid has opened to the outside.
    """
    h, w = boundary.shape
    yy, xx = np.mgrid[0:h, 0:w]
    return boundary & (np.hypot(xx - iris.cx, yy - iris.cy) < reach * iris.r)


def fit_contours(mask: np.ndarray, config: ContourConfig | None = None) -> EyeGeometry:
    """Fit iris and pupil circles to a segmentation mask.

    Raises :class:`NoIrisFound` / :class:`NoCircleFound` when the iris
    cannot be located.  A pupil that cannot be found (or violates the
    radius bounds) is replaced by a concentric circle of
    ``fallback_ratio * r`` and flagged.
    """
    cfg = config or ContourConfig()
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    comp, filled, outer, boundary = boundary_edges(mask)
    rough_blob = blob_from_pixels(filled) if cfg.fill_holes else comp
    (rx, ry), rr = rough_iris(rough_blob)

    r_lo = (1 - cfg.iris_radius_window) * rr
    r_hi = (1 + cfg.iris_radius_window) * rr
    dxr, dyr = cfg.iris_roi_fraction * w, cfg.iris_roi_fraction * h
    (icx, icy), ir, _ = cht(outer, (max(1, math.floor(r_lo)), math.ceil(r_hi)),
                            (rx - dxr, ry - dyr, rx + dxr, ry + dyr))
    iris = Circle(float(icx), float(icy), float(ir))

    fallback = EyeGeometry(iris, Circle(iris.cx, iris.cy, cfg.fallback_ratio * iris.r),
                           pupil_fallback=True)
    p_lo = max(1, math.ceil(cfg.pupil_ratio_min * ir))
    p_hi = math.floor(cfg.pupil_ratio_max * ir)
    roi = cfg.pupil_roi_fraction * ir
    if p_hi < p_lo:
        return fallback
    edges = inner_edges(boundary, iris, cfg.pupil_ratio_max + cfg.pupil_roi_fraction / 2)
    try:
        (pcx, pcy), pr, _ = cht(edges, (p_lo, p_hi),
                                (icx - roi, icy - roi, icx + roi, icy + roi))
    except NoCircleFound:
        return fallback
    inside = math.hypot(pcx - icx, pcy - icy) + pr < ir
    if not inside or not (cfg.pupil_ratio_min * ir <= pr <= cfg.pupil_ratio_max * ir):
        return fallback
    return EyeGeometry(iris, Circle(float(pcx), float(pcy), float(pr)))
