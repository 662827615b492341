"""FCN-based iris segmentation and recognition, with 8-bit fixed-point
inference and a functional model of a tiled GEMM accelerator."""

from .codec import IrisCode, encode, hamming, match_min_hd, rubber_sheet
from .contour import EyeGeometry, fit_contours
from .errors import (DimensionError, FormatError, GeometryError, IncomparableCodes,
                     IrisFcnError, NoCircleFound, NoIrisFound, TrainingError,
                     ValidationError)
from .fcn import ArchSpec, Network, build_arch, count_flops, infer
from .quant import QuantizedNetwork, quantize, quantized_infer

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "DimensionError", "EyeGeometry", "FormatError", "GeometryError",
    "IncomparableCodes", "IrisCode", "IrisFcnError", "Network", "NoCircleFound",
    "NoIrisFound", "QuantizedNetwork", "TrainingError", "ValidationError",
    "build_arch", "count_flops", "encode", "fit_contours", "hamming", "infer",
    "match_min_hd", "quantize", "quantized_infer", "rubber_sheet",
]
