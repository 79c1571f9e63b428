"""Image augmentation presets and their application.

Transforms are applied in a fixed order: rotation, flips, scale (the three
composed into a single center-anchored bilinear warp), Gaussian blur,
per-channel intensity scaling, additive Gaussian noise, additive linear
gradient, with a final clamp to [0,1]. Each step is skipped outright when its
parameter is the identity value, so an identity TransformSpec reproduces the
input bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

TRANSFORM_GROUPS = ("affine", "blur", "flip", "gradient", "noise", "intensity")


@dataclass(frozen=True)
class TransformSpec:
    """One concrete sampled transform (identity by default)."""

    rotation_deg: float = 0.0
    flip_h: bool = False
    flip_v: bool = False
    scale: float = 1.0
    blur_sigma_px: float = 0.0
    intensity_scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise_sigma: float = 0.0
    gradient_direction_deg: float = 0.0
    gradient_amplitude: float = 0.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


IDENTITY = TransformSpec()


@dataclass(frozen=True)
class AugmentPreset:
    """Sampling ranges for every transform plus the set of enabled groups.

    Disabling a group fixes all of its fields at their identity values.
    """

    name: str
    rotation_range: tuple[float, float] = (0.0, 360.0)
    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (1.0, 1.0)
    blur_range: tuple[float, float] = (0.0, 0.0)
    intensity_range: tuple[float, float] = (1.0, 1.0)
    noise_range: tuple[float, float] = (0.0, 0.0)
    gradient_range: tuple[float, float] = (0.0, 0.0)
    enabled: frozenset = frozenset(TRANSFORM_GROUPS)

    def without(self, *groups: str) -> "AugmentPreset":
        """Leave-one-out variant for the ablation harness."""
        unknown = set(groups) - set(TRANSFORM_GROUPS)
        if unknown:
            raise ValueError(f"unknown transform groups: {sorted(unknown)}")
        return replace(
            self,
            name=f"{self.name}-minus-{'-'.join(groups)}",
            enabled=self.enabled - set(groups),
        )


HEAVY = AugmentPreset(
    name="heavy",
    scale_range=(0.8, 1.2),
    blur_range=(0.0, 1.5),
    intensity_range=(0.7, 1.3),
    noise_range=(0.0, 0.08),
    gradient_range=(0.0, 0.3),
)

LIGHT = AugmentPreset(
    name="light",
    scale_range=(0.9, 1.1),
    blur_range=(0.0, 0.8),
    intensity_range=(0.8, 1.2),
    noise_range=(0.0, 0.03),
    gradient_range=(0.0, 0.15),
)

NONE = AugmentPreset(name="none", enabled=frozenset())

PRESETS = {"heavy": HEAVY, "light": LIGHT, "none": NONE}


def sample_transform(preset: AugmentPreset, rng: np.random.Generator) -> TransformSpec:
    """Draw one transform: each enabled group sampled independently from its range."""
    kw = {}
    if "affine" in preset.enabled:
        kw["rotation_deg"] = float(rng.uniform(*preset.rotation_range))
        kw["scale"] = float(rng.uniform(*preset.scale_range))
    if "flip" in preset.enabled:
        kw["flip_h"] = bool(rng.random() < preset.flip_prob)
        kw["flip_v"] = bool(rng.random() < preset.flip_prob)
    if "blur" in preset.enabled:
        kw["blur_sigma_px"] = float(rng.uniform(*preset.blur_range))
    if "intensity" in preset.enabled:
        kw["intensity_scale"] = tuple(
            float(rng.uniform(*preset.intensity_range)) for _ in range(3)
        )
    if "noise" in preset.enabled:
        kw["noise_sigma"] = float(rng.uniform(*preset.noise_range))
    if "gradient" in preset.enabled:
        kw["gradient_direction_deg"] = float(rng.uniform(0.0, 360.0))
        kw["gradient_amplitude"] = float(rng.uniform(*preset.gradient_range))
    return TransformSpec(**kw)


def _affine_matrix(t: TransformSpec) -> np.ndarray:
    """Forward 2x2 map in (x, y): rotation, then flips, then scale."""
    a = math.radians(t.rotation_deg)
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    flip = np.diag([-1.0 if t.flip_h else 1.0, -1.0 if t.flip_v else 1.0])
    return t.scale * flip @ rot


def apply(t: TransformSpec, patch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Apply a sampled transform to an H x W x 3 patch in [0,1]."""
    img = patch

    geometric = (
        t.rotation_deg != 0.0 or t.flip_h or t.flip_v or t.scale != 1.0
    )
    if geometric:
        m = _affine_matrix(t)
        m_inv = np.linalg.inv(m)
        h, w = img.shape[:2]
        center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        # scipy works in (row, col); swap axes of the (x, y) matrix
        swap = np.array([[0.0, 1.0], [1.0, 0.0]])
        m_rc = swap @ m_inv @ swap
        c_rc = center[::-1]
        offset = c_rc - m_rc @ c_rc
        out = np.empty_like(img)
        for ch in range(img.shape[2]):
            out[:, :, ch] = ndimage.affine_transform(
                img[:, :, ch], m_rc, offset=offset, order=1, mode="constant", cval=0.0
            )
        img = out

    if t.blur_sigma_px > 0:
        img = ndimage.gaussian_filter(img, sigma=(t.blur_sigma_px, t.blur_sigma_px, 0))

    if t.intensity_scale != (1.0, 1.0, 1.0):
        img = img * np.asarray(t.intensity_scale)[None, None, :]

    if t.noise_sigma > 0:
        img = img + rng.normal(0.0, t.noise_sigma, size=img.shape)

    if t.gradient_amplitude > 0:
        h, w = img.shape[:2]
        a = math.radians(t.gradient_direction_deg)
        yy, xx = np.mgrid[0:h, 0:w]
        proj = xx * math.cos(a) + yy * math.sin(a)
        lo, hi = proj.min(), proj.max()
        ramp = t.gradient_amplitude * (proj - lo) / (hi - lo)
        img = img + ramp[:, :, None]

    if img is patch:
        return patch.copy()
    return np.clip(img, 0.0, 1.0)


def augment_pair(
    patch: np.ndarray, preset: AugmentPreset, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Two independently transformed views of the same source patch."""
    t1 = sample_transform(preset, rng)
    t2 = sample_transform(preset, rng)
    return apply(t1, patch, rng), apply(t2, patch, rng)


# leave-one-out ablation columns, keyed by report column name
ABLATION_COLUMNS = {
    "affine": ("affine",),
    "blur": ("blur",),
    "flip": ("flip",),
    "grad": ("gradient",),
    "noise": ("noise",),
    "int": ("intensity",),
    "grad_noise": ("gradient", "noise"),
}
