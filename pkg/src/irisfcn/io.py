"""File formats: images, weights, iris codes, geometry, scores, metrics, config.

Binary formats are little-endian and self-describing; see README for the
byte layouts.  Every writer is deterministic, so read -> write reproduces
the original bytes.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
import os
import struct
import sys
from dataclasses import dataclass

import numpy as np

from .codec import IrisCode
from .contour import EyeGeometry
from .errors import FormatError, ValidationError
from .evaluation import ScorePair, ScoreSet
from .fcn import KIND_CODES, SOFTMAX, ArchSpec, LayerSpec, Network, arch_layers
from .quant import DfpParams, QuantizedNetwork

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

FORMAT_VERSION = 1
NONE_I8 = -128
NONE_I16 = -1
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
IMAGE_EXTS = (".pgm", ".png")


# ---------------------------------------------------------------------------
# images

def _pgm_tokens(data: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos


def read_pgm(path: str) -> np.ndarray:
    """8-bit binary (P5) or ASCII (P2) PGM as a uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    if magic not in (b"P5", b"P2"):
        raise FormatError(f"{path}: not a PGM file")
    try:
        tokens, pos = _pgm_tokens(data, 3)
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    if not 0 < maxval <= 255 or w < 1 or h < 1:
        raise FormatError(f"{path}: only 8-bit PGM images are supported")
    if magic == b"P5":
        body = data[pos + 1:pos + 1 + w * h]
        if len(body) != w * h:
            raise FormatError(f"{path}: truncated pixel data")
        pix = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    else:
        vals = data[pos:].split()
        if len(vals) < w * h:
            raise FormatError(f"{path}: truncated pixel data")
        pix = np.array([int(v) for v in vals[:w * h]], dtype=np.uint8).reshape(h, w)
    if maxval != 255:
        pix = np.round(pix.astype(np.float64) * 255 / maxval).astype(np.uint8)
    return pix.copy()


def write_pgm(path: str, image: np.ndarray):
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValidationError(f"PGM images must be 2-D, got {img.shape}")
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    img = np.clip(img, 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_image(path: str) -> np.ndarray:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        from PIL import Image  # optional format; keep Pillow off the import path otherwise
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8).copy()
    return read_pgm(path)


def write_image(path: str, image: np.ndarray):
    if os.path.splitext(path)[1].lower() == ".png":
        from PIL import Image
        img = np.asarray(image)
        if img.dtype == bool:
            img = img.astype(np.uint8) * 255
        Image.fromarray(np.clip(img, 0, 255).astype(np.uint8), mode="L").save(path)
    else:
        write_pgm(path, image)


def read_mask(path: str) -> np.ndarray:
    """Nonzero pixels are iris."""
    return read_image(path) != 0


# ---------------------------------------------------------------------------
# binary helpers

class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: unexpected end of file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize("<" + fmt)
        return struct.unpack("<" + fmt, self.take(size))

    def string(self) -> str:
        (n,) = self.unpack("H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{self.what}: invalid string") from None

    def array(self, dtype, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(dtype)

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: {len(self.data) - self.pos} trailing bytes")


def _string(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _header(magic: bytes, r: _Reader):
    if r.take(4) != magic:
        raise FormatError(f"{r.what}: bad magic, expected {magic.decode()}")
    (version,) = r.unpack("H")
    if version != FORMAT_VERSION:
        raise FormatError(f"{r.what}: unsupported version {version}")


def _opt(v, none):
    return none if v is None else v


def _pack_layer(layer: LayerSpec) -> bytes:
    return struct.pack("<BBBBHHBbh", KIND_CODES[layer.kind], layer.filter, layer.stride,
                       layer.padding, layer.in_channels, layer.out_channels, int(layer.relu),
                       _opt(layer.group, -1), _opt(layer.skip_partner, NONE_I16))


def _unpack_layer(r: _Reader) -> LayerSpec:
    kind, k, s, p, ic, oc, relu, group, skip = r.unpack("BBBBHHBbh")
    if kind not in KIND_NAMES:
        raise FormatError(f"{r.what}: unknown layer kind {kind}")
    return LayerSpec(KIND_NAMES[kind], k, s, p, ic, oc, bool(relu),
                     None if group < 0 else group, None if skip < 0 else skip)


def _pack_common(magic, arch_string, scale, n, dims, layers) -> bytes:
    h, w = dims if dims else (0, 0)
    out = [magic, struct.pack("<H", FORMAT_VERSION), _string(arch_string),
           struct.pack("<fHIIH", scale, n, h, w, len(layers))]
    out += [_pack_layer(l) for l in layers]
    return b"".join(out)


def _unpack_common(magic, r: _Reader):
    _header(magic, r)
    arch_string = r.string()
    scale, n, h, w, count = r.unpack("fHIIH")
    layers = [_unpack_layer(r) for _ in range(count)]
    arch = None
    if arch_string != "custom":
        try:
            arch = ArchSpec.parse(arch_string, scale, n).validate()
        except ValidationError as exc:
            raise FormatError(f"{r.what}: {exc}") from None
        if arch_layers(arch) != layers:
            raise FormatError(f"{r.what}: layer table does not match {arch_string}")
    return arch, float(scale), n, ((h, w) if h and w else None), layers


def _check_skips(layers, what):
    for i, l in enumerate(layers):
        if l.skip_partner is not None and not 0 <= l.skip_partner < i:
            raise FormatError(f"{what}: layer {i} has invalid skip partner {l.skip_partner}")


# ---------------------------------------------------------------------------
# FCNW: float weights

def fcnw_bytes(net: Network) -> bytes:
    out = [_pack_common(b"FCNW", net.arch_string, net.scale, net.n_channels,
                        net.input_dims, net.layers)]
    for layer, p in zip(net.layers, net.params):
        if layer.kind == SOFTMAX:
            continue
        out.append(np.asarray(p[0], dtype="<f4").tobytes())
        out.append(np.asarray(p[1], dtype="<f4").tobytes())
    return b"".join(out)


def parse_fcnw(data: bytes, what: str = "FCNW") -> Network:
    r = _Reader(data, what)
    arch, scale, n, dims, layers = _unpack_common(b"FCNW", r)
    _check_skips(layers, what)
    params = []
    for layer in layers:
        if layer.kind == SOFTMAX:
            params.append(None)
            continue
        shape = layer.weight_shape
        w = r.array(np.float32, int(np.prod(shape))).reshape(shape)
        b = r.array(np.float32, layer.out_channels)
        params.append((w, b))
    r.done()
    return Network(layers, params, scale, arch, dims, n)


def write_fcnw(path: str, net: Network):
    with open(path, "wb") as fh:
        fh.write(fcnw_bytes(net))


def read_fcnw(path: str) -> Network:
    with open(path, "rb") as fh:
        return parse_fcnw(fh.read(), path)


# ---------------------------------------------------------------------------
# FCNQ: DFP weights

def fcnq_bytes(q: QuantizedNetwork) -> bytes:
    out = [_pack_common(b"FCNQ", q.arch_string, q.scale, q.n_channels, q.input_dims,
                        q.layers), struct.pack("<b", q.input_fl)]
    for layer, p in zip(q.layers, q.dfp):
        if layer.kind == SOFTMAX:
            continue
        out.append(struct.pack("<BBbbbbb", p.w_bw, p.a_bw, p.w_fl, p.a_in, p.a_out,
                               _opt(p.c_fl, NONE_I8), _opt(p.branch_fl, NONE_I8)))
    for layer, w, b in zip(q.layers, q.weights, q.biases):
        if layer.kind == SOFTMAX:
            continue
        out.append(np.asarray(w, dtype=np.int8).tobytes())
        out.append(np.asarray(b, dtype="<i4").tobytes())
    return b"".join(out)


def parse_fcnq(data: bytes, what: str = "FCNQ") -> QuantizedNetwork:
    r = _Reader(data, what)
    arch, scale, n, dims, layers = _unpack_common(b"FCNQ", r)
    _check_skips(layers, what)
    (input_fl,) = r.unpack("b")
    dfp = []
    for layer in layers:
        if layer.kind == SOFTMAX:
            dfp.append(None)
            continue
        w_bw, a_bw, w_fl, a_in, a_out, c_fl, br = r.unpack("BBbbbbb")
        try:
            dfp.append(DfpParams(w_bw, a_bw, w_fl, a_in, a_out,
                                 None if c_fl == NONE_I8 else c_fl,
                                 None if br == NONE_I8 else br))
        except ValidationError as exc:
            raise FormatError(f"{what}: {exc}") from None
    weights, biases = [], []
    for layer in layers:
        if layer.kind == SOFTMAX:
            weights.append(None)
            biases.append(None)
            continue
        shape = layer.weight_shape
        weights.append(r.array(np.int8, int(np.prod(shape))).reshape(shape))
        biases.append(r.array(np.int32, layer.out_channels))
    r.done()
    try:
        return QuantizedNetwork(layers, weights, biases, dfp, scale, arch, dims, n, input_fl)
    except ValidationError as exc:
        raise FormatError(f"{what}: {exc}") from None


def write_fcnq(path: str, q: QuantizedNetwork):
    with open(path, "wb") as fh:
        fh.write(fcnq_bytes(q))


def read_fcnq(path: str) -> QuantizedNetwork:
    with open(path, "rb") as fh:
        return parse_fcnq(fh.read(), path)


def read_weights(path: str):
    """Load an FCNW or FCNQ file, chosen by its magic bytes."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] == b"FCNW":
        return parse_fcnw(data, path)
    if data[:4] == b"FCNQ":
        return parse_fcnq(data, path)
    raise FormatError(f"{path}: neither an FCNW nor an FCNQ file")


# ---------------------------------------------------------------------------
# IRCD: iris code + mask

def ircd_bytes(code: IrisCode) -> bytes:
    rows, cols = code.code.shape
    return b"".join([b"IRCD", struct.pack("<HHH", FORMAT_VERSION, rows, cols),
                     np.packbits(code.code, axis=None).tobytes(),
                     np.packbits(code.mask, axis=None).tobytes()])


def parse_ircd(data: bytes, what: str = "IRCD") -> IrisCode:
    r = _Reader(data, what)
    _header(b"IRCD", r)
    rows, cols = r.unpack("HH")
    nbytes = -(-rows * cols // 8)
    bits = [np.unpackbits(np.frombuffer(r.take(nbytes), dtype=np.uint8))[:rows * cols]
            for _ in range(2)]
    r.done()
    return IrisCode(bits[0].reshape(rows, cols), bits[1].reshape(rows, cols))


def write_ircd(path: str, code: IrisCode):
    with open(path, "wb") as fh:
        fh.write(ircd_bytes(code))


def read_ircd(path: str) -> IrisCode:
    with open(path, "rb") as fh:
        return parse_ircd(fh.read(), path)


# ---------------------------------------------------------------------------
# JSON / CSV

def dump_json(path: str, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None


def write_geometry(path: str, geometry: EyeGeometry):
    dump_json(path, geometry.to_dict())


def read_geometry(path: str) -> EyeGeometry:
    return EyeGeometry.from_dict(load_json(path))


SCORE_COLUMNS = ("probe_id", "gallery_id", "label", "hd", "rotation")


def scores_csv(scores: ScoreSet) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORE_COLUMNS)
    for p in scores.pairs:
        w.writerow([p.probe_id, p.gallery_id, p.label, repr(float(p.hd)), p.rotation])
    return buf.getvalue()


def write_scores(path: str, scores: ScoreSet):
    with open(path, "w", newline="") as fh:
        fh.write(scores_csv(scores))


def read_scores(path: str) -> ScoreSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != SCORE_COLUMNS:
        raise FormatError(f"{path}: expected header {','.join(SCORE_COLUMNS)}")
    out = ScoreSet()
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(SCORE_COLUMNS):
            raise FormatError(f"{path}:{i}: expected {len(SCORE_COLUMNS)} fields")
        try:
            hd, rot = float(row[3]), int(row[4])
        except ValueError:
            raise FormatError(f"{path}:{i}: bad hd/rotation") from None
        if row[2] not in ("genuine", "impostor") or not 0 <= hd <= 1:
            raise FormatError(f"{path}:{i}: bad label or hd")
        out.pairs.append(ScorePair(row[0], row[1], row[2], hd, rot))
    return out


def write_roc(path: str, thresholds, far, frr):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "far", "frr"])
        for t, a, r in zip(thresholds, far, frr):
            w.writerow(["-inf" if math.isinf(t) else repr(float(t)), repr(float(a)),
                        repr(float(r))])


# ---------------------------------------------------------------------------
# config

CONFIG_SECTIONS = ("train", "contour", "gabor", "quant", "synth")


def load_config(path: str | None) -> dict:
    """Parse a TOML config into ``{section: {key: value}}``."""
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise FormatError(f"{path}: invalid TOML ({exc})") from None
    unknown = set(data) - set(CONFIG_SECTIONS)
    if unknown:
        raise ValidationError(f"{path}: unknown config sections {sorted(unknown)}")
    for name, section in data.items():
        if not isinstance(section, dict):
            raise ValidationError(f"{path}: [{name}] must be a table")
    return data


# ---------------------------------------------------------------------------
# dataset layout

@dataclass
class Sample:
    name: str
    identity: str
    image_path: str
    mask_path: str | None

    def image(self) -> np.ndarray:
        return read_image(self.image_path)

    def mask(self) -> np.ndarray:
        if self.mask_path is None:
            raise ValidationError(f"{self.name} has no ground-truth mask")
        m = read_mask(self.mask_path)
        img = self.image()
        if m.shape != img.shape:
            raise ValidationError(f"{self.name}: mask {m.shape} vs image {img.shape}")
        return m


def identity_of(name: str) -> str:
    return name.split("_", 1)[0]


def list_images(directory: str) -> dict:
    """``{basename: path}`` for every PGM/PNG file in ``directory``."""
    if not os.path.isdir(directory):
        raise ValidationError(f"{directory} is not a directory")
    out = {}
    for fn in sorted(os.listdir(directory)):
        stem, ext = os.path.splitext(fn)
        if ext.lower() in IMAGE_EXTS:
            if stem in out:
                raise ValidationError(f"{directory}: duplicate image basename {stem}")
            out[stem] = os.path.join(directory, fn)
    return out


def load_dataset(root: str, require_masks: bool = False) -> list:
    """Samples from ``root/images`` (and ``root/masks`` when present)."""
    images = list_images(os.path.join(root, "images"))
    if not images:
        raise ValidationError(f"{root}/images holds no PGM/PNG files")
    mask_dir = os.path.join(root, "masks")
    masks = list_images(mask_dir) if os.path.isdir(mask_dir) else {}
    if masks or require_masks:
        missing = sorted(set(images) - set(masks))
        if missing:
            raise ValidationError(f"{root}: no mask for {missing[:5]}")
    return [Sample(name, identity_of(name), path, masks.get(name))
            for name, path in images.items()]
