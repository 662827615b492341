"""Command-line entry point: ``irisfcn <command> ...``.

Exit codes: 0 success, 1 usage error, 2 invalid data or input, 3 pipeline
failure.  Errors are reported on stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from . import io
from .accel import TileConfig, run_network_on_accel
from .codec import GaborParams
from .contour import ContourConfig, fit_contours
from .errors import IrisFcnError, ValidationError
from .evaluation import all_pairs, evaluate_masks, match_gallery, roc, summary
from .fcn import ArchSpec, build_arch, count_flops
from .pipeline import eye_code, segment
from .quant import CALIBRATION_SIZE, QuantizedNetwork, quantize
from .synth import SyntheticEyeSpec, synth_generate
from .train import TrainConfig, train

log = logging.getLogger("irisfcn")


class UsageError(Exception):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _section(cfg: dict, name: str, cls):
    data = dict(cfg.get(name, {}))
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ValidationError(f"unknown [{name}] keys: {sorted(unknown)}")
    return cls(**data)


def _parse_dims(text: str):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"dims must look like 320x240 (width x height), got {text!r}") from None
    if w < 1 or h < 1:
        raise UsageError("dims must be positive")
    return h, w


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands

def cmd_train(args):
    cfg = io.load_config(args.config)
    tcfg = TrainConfig.from_mapping(cfg.get("train", {}))
    samples = io.load_dataset(args.data, require_masks=True)
    pairs = [(s.image(), s.mask()) for s in samples]
    dims = {p[0].shape for p in pairs}
    if len(dims) != 1:
        raise ValidationError(f"training images must share dims, got {sorted(dims)}")
    spec = ArchSpec.parse(args.arch, args.scale, args.n)
    net = build_arch(spec, input_dims=dims.pop(), seed=args.seed)
    result = train(net, pairs, tcfg,
                   progress=lambda e, l: log.info("epoch %d loss %.6f", e, l))
    io.write_fcnw(args.out, result.net)
    _emit({"out": args.out, "best_epoch": result.best_epoch, "alpha": result.alpha,
           "epoch_losses": result.epoch_losses})


def cmd_segment(args):
    model = io.read_weights(args.weights)
    mask = segment(model, io.read_image(args.input))
    io.write_image(args.out, mask)
    _emit({"out": args.out, "iris_pixels": int(mask.sum()),
           "engine": "dfp" if isinstance(model, QuantizedNetwork) else "float"})


def _image_paths(directory: str):
    sub = os.path.join(directory, "images")
    return list(io.list_images(sub if os.path.isdir(sub) else directory).values())


def cmd_quantize(args):
    cfg = io.load_config(args.config).get("quant", {})
    unknown = set(cfg) - {"calibration_size", "seed"}
    if unknown:
        raise ValidationError(f"unknown [quant] keys: {sorted(unknown)}")
    net = io.read_fcnw(args.weights)
    images = [io.read_image(p) for p in _image_paths(args.calib)]
    q = quantize(net, images, int(cfg.get("calibration_size", CALIBRATION_SIZE)),
                 int(cfg.get("seed", 0)))
    io.write_fcnq(args.out, q)
    _emit({"out": args.out, "calibration_pool": len(images),
           "dfp": [None if p is None else dataclasses.asdict(p) for p in q.dfp]})


def cmd_fit(args):
    ccfg = _section(io.load_config(args.config), "contour", ContourConfig)
    geometry = fit_contours(io.read_mask(args.mask), ccfg)
    io.write_geometry(args.out, geometry)
    _emit(geometry.to_dict())


def cmd_encode(args):
    gabor = _section(io.load_config(args.config), "gabor", GaborParams)
    image = io.read_image(args.image)
    mask = io.read_mask(args.mask)
    code = eye_code(image, mask, io.read_geometry(args.geometry), gabor)
    io.write_ircd(args.out, code)
    _emit({"out": args.out, "valid_bits": int(code.mask.sum())})


def _gallery(directory: str):
    if not os.path.isdir(directory):
        raise ValidationError(f"{directory} is not a directory")
    entries = []
    for fn in sorted(os.listdir(directory)):
        if fn.endswith(".ircd"):
            stem = fn[:-5]
            entries.append((stem, io.identity_of(stem), os.path.join(directory, fn)))
    if not entries:
        raise ValidationError(f"{directory} holds no .ircd files")
    return entries


def cmd_match(args):
    entries = _gallery(args.gallery)
    if args.probe:
        probe_path = os.path.abspath(args.probe)
        stem = os.path.splitext(os.path.basename(args.probe))[0]
        gallery = [(sid, ident, io.read_ircd(p)) for sid, ident, p in entries
                   if os.path.abspath(p) != probe_path]
        if not gallery:
            raise ValidationError("gallery is empty once the probe is excluded")
        scores = match_gallery(stem, io.identity_of(stem), io.read_ircd(args.probe), gallery)
    else:
        scores = all_pairs([(sid, ident, io.read_ircd(p)) for sid, ident, p in entries]).sorted()
    io.write_scores(args.out, scores)
    _emit({"out": args.out, "pairs": len(scores.pairs), "incomparable": scores.incomparable})


def cmd_eval(args):
    if args.scores:
        scores = io.read_scores(args.scores)
        if args.roc:
            io.write_roc(args.roc, *roc(scores))
        result = summary(scores)
        if args.out:
            io.dump_json(args.out, result)
        _emit(result)
        return
    if not (args.pred and args.gt):
        raise UsageError("eval needs either --scores or both --pred and --gt")
    preds, gts = io.list_images(args.pred), io.list_images(args.gt)
    missing = sorted(set(preds) - set(gts))
    if missing:
        raise ValidationError(f"no ground truth for {missing[:5]}")
    report = evaluate_masks((n, io.read_mask(preds[n]), io.read_mask(gts[n]))
                            for n in sorted(preds))
    result = report.to_dict()
    if args.out:
        io.dump_json(args.out, result)
    _emit({k: result[k] for k in ("count", "P", "R", "F", "E1", "E2", "degenerate")})


def cmd_flops(args):
    spec = ArchSpec.parse(args.arch, args.scale, args.n)
    print(count_flops(spec, _parse_dims(args.dims)))


def cmd_accel(args):
    model = io.read_weights(args.weights)
    mask, report = run_network_on_accel(model, io.read_image(args.input),
                                        TileConfig(c_bits=args.c_bits), args.backend)
    with open(args.report, "w") as fh:
        fh.write(report.to_json())
    if args.out:
        io.write_image(args.out, mask)
    _emit({"report": args.report, "iris_pixels": int(mask.sum()), **report.totals})


def cmd_synth(args):
    cfg = io.load_config(args.spec) if args.spec else {}
    data = cfg.get("synth", {})
    spec = SyntheticEyeSpec.from_mapping(data)
    names = synth_generate(spec, args.out)
    _emit({"out": args.out, "samples": len(names)})


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="irisfcn", description="FCN iris segmentation and recognition toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def arch_args(sp):
        sp.add_argument("--arch", required=True, help="group list, e.g. 0-1-2-4-2-1-0")
        sp.add_argument("--scale", type=float, default=1.0)
        sp.add_argument("--n", type=int, default=16, help="base channel count")

    sp = sub.add_parser("train", help="train a network on images/ + masks/")
    arch_args(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int, default=0, help="weight-initialisation seed")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("segment", help="segment one image with FCNW or FCNQ weights")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("quantize", help="convert FCNW weights to 8-bit DFP")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--calib", required=True, help="dataset root or image directory")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("fit", help="fit iris and pupil circles to a mask")
    sp.add_argument("--mask", required=True)
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("encode", help="normalise and encode one eye")
    sp.add_argument("--image", required=True)
    sp.add_argument("--mask", required=True)
    sp.add_argument("--geometry", required=True)
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("match", help="score a probe against a gallery of codes")
    sp.add_argument("--probe", help="omit to score every pair in the gallery")
    sp.add_argument("--gallery", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_match)

    sp = sub.add_parser("eval", help="segmentation metrics or ROC/EER")
    sp.add_argument("--pred")
    sp.add_argument("--gt")
    sp.add_argument("--scores")
    sp.add_argument("--roc")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("flops", help="FLOPs per inference")
    arch_args(sp)
    sp.add_argument("--dims", required=True, help="WIDTHxHEIGHT, e.g. 320x240")
    sp.set_defaults(func=cmd_flops)

    sp = sub.add_parser("accel", help="run inference on the GEMM engine model")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--report", required=True)
    sp.add_argument("--backend", choices=("ref", "accel"), default="accel")
    sp.add_argument("--c-bits", type=int, default=16, help="C buffer width in bits")
    sp.add_argument("--out", help="optional mask output")
    sp.set_defaults(func=cmd_accel)

    sp = sub.add_parser("synth", help="generate a synthetic eye dataset")
    sp.add_argument("--spec", help="TOML file with a [synth] table")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)
    return p


def _fail(exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                 "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(exc, 1)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        return _fail(exc, 1)
    except IrisFcnError as exc:
        return _fail(exc, exc.exit_code)
    except (ValueError, OSError) as exc:
        return _fail(exc, 2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
