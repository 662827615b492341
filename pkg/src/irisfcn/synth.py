"""Procedural eye images with exact ground truth, as a stand-in dataset.

Each identity owns a seeded texture defined in normalised iris coordinates
(radial fraction, angle); every rendered instance re-samples that texture
under its own pose, so the rubber-sheet unwrapping of any two instances of
one identity is (up to rotation and noise) the same pattern.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ValidationError


@dataclass
class SyntheticEyeSpec:
    seed: int = 0
    height: int = 128
    width: int = 128
    iris_radius_min: float = 34.0
    iris_radius_max: float = 42.0
    pupil_ratio_min: float = 0.3
    pupil_ratio_max: float = 0.5
    octaves: int = 4
    occlusion: float = 0.0
    noise: float = 0.02
    center_jitter: float = 6.0
    rotation_jitter: float = 8.0
    identities: int = 10
    per_identity: int = 5

    def validate(self):
        if self.height < 16 or self.width < 16:
            raise ValidationError("synthetic images must be at least 16x16")
        if not 0 < self.iris_radius_min <= self.iris_radius_max:
            raise ValidationError("iris radius range is empty")
        if not 0.1 <= self.pupil_ratio_min <= self.pupil_ratio_max <= 0.8:
            raise ValidationError("pupil ratio range must lie inside [0.1, 0.8]")
        if not 0 <= self.occlusion < 1:
            raise ValidationError("occlusion fraction must lie in [0, 1)")
        if self.octaves < 1 or self.noise < 0:
            raise ValidationError("octaves must be >= 1 and noise >= 0")
        reach = self.iris_radius_max + self.center_jitter + 2
        if 2 * reach > min(self.height, self.width):
            raise ValidationError("iris does not fit inside the image")
        return self

    @classmethod
    def from_mapping(cls, data: dict) -> "SyntheticEyeSpec":
        names = set(cls.__dataclass_fields__)
        unknown = set(data) - names
        if unknown:
            raise ValidationError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**data).validate()


@dataclass
class IrisTexture:
    """Sum of seeded sinusoids in (radial fraction, angle) space."""

    radial_freq: np.ndarray
    angular_freq: np.ndarray
    phase: np.ndarray
    amplitude: np.ndarray

    @classmethod
    def for_identity(cls, seed: int, identity: int, octaves: int) -> "IrisTexture":
        rng = np.random.default_rng([seed, identity, 0])
        rf, af, ph, am = [], [], [], []
        for o in range(octaves):
            for _ in range(6):
                af.append(rng.integers(2 ** (o + 2), 2 ** (o + 3) + 1))
                rf.append(rng.uniform(0.3, 1.5) * (o + 1))
                ph.append(rng.uniform(0, 2 * math.pi))
                am.append(rng.uniform(0.5, 1.0) / (o + 1))
        am = np.array(am)
        return cls(np.array(rf), np.array(af, dtype=float), np.array(ph), am / am.sum())

    def __call__(self, rho, theta):
        rho = np.asarray(rho, dtype=np.float64)[..., None]
        theta = np.asarray(theta, dtype=np.float64)[..., None]
        # second sinusoid in the phase couples radius and angle into crypt-like blobs
        arg = (self.angular_freq * theta + 2 * math.pi * self.radial_freq * rho
               + self.phase)
        return (self.amplitude * np.sin(arg + 0.8 * np.sin(2 * arg))).sum(-1)


@dataclass
class EyeSample:
    image: np.ndarray
    mask: np.ndarray
    geometry: dict


def render_eye(spec: SyntheticEyeSpec, identity: int, instance: int) -> EyeSample:
    """Render one eye image, its exact iris mask, and its true geometry."""
    spec.validate()
    tex = IrisTexture.for_identity(spec.seed, identity, spec.octaves)
    id_rng = np.random.default_rng([spec.seed, identity, 1])
    base_ratio = id_rng.uniform(spec.pupil_ratio_min, spec.pupil_ratio_max)
    base_radius = id_rng.uniform(spec.iris_radius_min, spec.iris_radius_max)
    iris_tone = id_rng.uniform(95, 125)

    rng = np.random.default_rng([spec.seed, identity, 2, instance])
    h, w = spec.height, spec.width
    cx = (w - 1) / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter)
    cy = (h - 1) / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter)
    radius = float(np.clip(base_radius + rng.uniform(-1.5, 1.5),
                           spec.iris_radius_min, spec.iris_radius_max))
    ratio = float(np.clip(base_ratio + rng.uniform(-0.04, 0.04),
                          spec.pupil_ratio_min, spec.pupil_ratio_max))
    p_r = ratio * radius
    # keep the pupil well inside the iris
    off = rng.uniform(-1, 1, size=2) * 0.04 * radius
    pcx, pcy = cx + off[0], cy + off[1]
    rot = math.radians(rng.uniform(-spec.rotation_jitter, spec.rotation_jitter))
    gain = rng.uniform(0.92, 1.08)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d_iris = np.hypot(xx - cx, yy - cy)
    dx, dy = xx - pcx, yy - pcy
    d_pupil = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    # distance from the pupil centre to the iris circle along each ray
    ux, uy = np.cos(theta), np.sin(theta)
    ox, oy = pcx - cx, pcy - cy
    bq = ox * ux + oy * uy
    t_iris = -bq + np.sqrt(np.maximum(bq ** 2 - (ox ** 2 + oy ** 2 - radius ** 2), 0))
    rho = np.clip((d_pupil - p_r) / np.maximum(t_iris - p_r, 1e-9), 0, 1)

    in_pupil = d_pupil <= p_r
    in_iris = (d_iris <= radius) & ~in_pupil

    img = 205 + 12 * np.cos(0.02 * (xx - cx)) * np.cos(0.017 * (yy - cy))
    pattern = tex(rho, theta - rot)
    img = np.where(in_iris, iris_tone + 70 * pattern - 8 * rho, img)
    img = np.where(in_pupil, 22 + 4 * np.cos(0.3 * xx), img)
    occluded = np.zeros_like(in_iris)
    if spec.occlusion > 0:
        # parabolic upper eyelid covering the top `occlusion` fraction of the iris
        lid_y = cy - radius + 2 * radius * spec.occlusion
        occluded = yy < lid_y + ((xx - cx) / (1.6 * radius)) ** 2 * radius * 0.5
        img = np.where(occluded, 168 + 6 * np.sin(0.15 * xx + 0.1 * yy), img)
    img = img * gain + rng.normal(0, spec.noise * 255, size=img.shape)
    image = np.clip(np.round(img), 0, 255).astype(np.uint8)
    mask = in_iris & ~occluded
    geometry = {"iris": {"cx": cx, "cy": cy, "r": radius},
                "pupil": {"cx": float(pcx), "cy": float(pcy), "r": p_r},
                "rotation_deg": math.degrees(rot), "identity": identity,
                "instance": instance}
    return EyeSample(image, mask, geometry)


def sample_name(identity: int, instance: int) -> str:
    return f"id{identity:03d}_{instance:02d}"


def synth_generate(spec: SyntheticEyeSpec, out_dir: str, per_identity: int | None = None,
                   identities=None) -> list[str]:
    """Write images/, masks/ and geometry/ for every (identity, instance).

    Returns the sample names in generation order.
    """
    from .io import write_pgm  # local import keeps synth usable without io side effects

    spec.validate()
    per_identity = spec.per_identity if per_identity is None else per_identity
    identities = range(spec.identities) if identities is None else identities
    for sub in ("images", "masks", "geometry"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    names = []
    for ident in identities:
        for inst in range(per_identity):
            s = render_eye(spec, ident, inst)
            name = sample_name(ident, inst)
            write_pgm(os.path.join(out_dir, "images", name + ".pgm"), s.image)
            write_pgm(os.path.join(out_dir, "masks", name + ".pgm"),
                      s.mask.astype(np.uint8) * 255)
            with open(os.path.join(out_dir, "geometry", name + ".json"), "w") as fh:
                json.dump(s.geometry, fh, indent=2, sort_keys=True)
                fh.write("\n")
            names.append(name)
    with open(os.path.join(out_dir, "spec.json"), "w") as fh:
        json.dump(asdict(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return names
