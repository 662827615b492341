"""Glue for the recognition chain: segment, fit circles, normalise, encode."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import GaborParams, IrisCode, encode, rubber_sheet
from .contour import ContourConfig, EyeGeometry, fit_contours
from .errors import ValidationError
from .fcn import Network, infer
from .quant import QuantizedNetwork, quantized_infer


def segment(model, image: np.ndarray) -> np.ndarray:
    """Run whichever engine matches ``model`` (float or DFP)."""
    if isinstance(model, QuantizedNetwork):
        return quantized_infer(model, image)
    if isinstance(model, Network):
        return infer(model, image)
    raise ValidationError(f"cannot segment with {type(model).__name__}")


def eye_code(image: np.ndarray, mask: np.ndarray, geometry: EyeGeometry,
             gabor: GaborParams | None = None) -> IrisCode:
    return encode(rubber_sheet(image, geometry, mask), gabor)


@dataclass
class EyeResult:
    mask: np.ndarray
    geometry: EyeGeometry
    code: IrisCode


def process_eye(model, image: np.ndarray, contour: ContourConfig | None = None,
                gabor: GaborParams | None = None) -> EyeResult:
    """Segmentation through encoding for one image."""
    mask = segment(model, image)
    geometry = fit_contours(mask, contour)
    return EyeResult(mask, geometry, eye_code(image, mask, geometry, gabor))
