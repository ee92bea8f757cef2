"""Training-time augmentation.

Spatial transforms (left-right flip, in-plane rotation about the
inferior-superior axis, sub-voxel translation) are drawn once per case and
applied identically to both image channels (trilinear) and the label
(nearest-neighbor). Intensity transforms (gamma correction on a [0,1]-rescaled
copy, additive Gaussian noise) are drawn per channel. Spatial and intensity
draws are separable so consistency-training can share the former and vary the
latter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentationSpec:
    flip_prob: float = 0.5
    max_translation: tuple[int, int, int] = (10, 12, 2)   # voxels along LR, AP, IS
    max_rotation_deg: float = 15.0                        # about the IS axis
    noise_sigma_range: tuple[float, float] = (0.0, 0.15)
    gamma_range: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        if not (0.0 <= self.flip_prob <= 1.0):
            raise AugmentError("flip_prob must be in [0,1]")
        if self.noise_sigma_range[0] > self.noise_sigma_range[1]:
            raise AugmentError("noise_sigma_range must be ordered")
        if self.gamma_range[0] > self.gamma_range[1]:
            raise AugmentError("gamma_range must be ordered")


@dataclass(frozen=True)
class SpatialDraw:
    flip: bool
    translation: tuple[float, float, float]
    rotation_deg: float

    def is_identity(self) -> bool:
        return not self.flip and self.rotation_deg == 0.0 and all(t == 0.0 for t in self.translation)


@dataclass(frozen=True)
class IntensityDraw:
    noise_sigma: float
    gamma: float
    noise_seed: int


def draw_spatial(rng: np.random.Generator, spec: AugmentationSpec) -> SpatialDraw:
    flip = bool(rng.random() < spec.flip_prob)
    translation = tuple(float(rng.uniform(-m, m)) for m in spec.max_translation)
    rotation = float(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg))
    return SpatialDraw(flip, translation, rotation)


def draw_intensity(rng: np.random.Generator, spec: AugmentationSpec) -> IntensityDraw:
    sigma = float(rng.uniform(*spec.noise_sigma_range))
    gamma = float(rng.uniform(*spec.gamma_range))
    return IntensityDraw(sigma, gamma, int(rng.integers(0, 2**62)))


def spatial_matrix(draw: SpatialDraw, shape: tuple[int, int, int]) -> np.ndarray:
    """4x4 voxel-space matrix of the flip+rotation+translation (for assertions)."""
    m = np.eye(4)
    if draw.flip:
        f = np.eye(4)
        f[0, 0] = -1.0
        f[0, 3] = shape[0] - 1.0
        m = f @ m
    theta = np.deg2rad(draw.rotation_deg)
    c = (np.asarray(shape, dtype=float) - 1.0) / 2.0
    rot = np.eye(4)
    rot[0, 0] = np.cos(theta)
    rot[0, 1] = -np.sin(theta)
    rot[1, 0] = np.sin(theta)
    rot[1, 1] = np.cos(theta)
    rot[:3, 3] = c - rot[:3, :3] @ c
    m = rot @ m
    t = np.eye(4)
    t[:3, 3] = draw.translation
    return t @ m


def apply_spatial(data: np.ndarray, draw: SpatialDraw, order: int) -> np.ndarray:
    """Resample under the drawn transform; order 1 for images, 0 for labels."""
    if draw.is_identity():
        return data.copy()
    out = data
    if draw.flip:
        out = out[::-1]
    theta = np.deg2rad(draw.rotation_deg)
    rot = np.array(
        [
            [np.cos(theta), -np.sin(theta), 0.0],
            [np.sin(theta), np.cos(theta), 0.0],
            [0.0, 0.0, 1.0],
        ]
    )
    center = (np.asarray(data.shape, dtype=float) - 1.0) / 2.0
    t = np.asarray(draw.translation, dtype=float)
    # output(i) = input(R^-1 (i - c - t) + c)
    matrix = rot.T
    offset = center - rot.T @ (center + t)
    return ndimage.affine_transform(
        np.ascontiguousarray(out), matrix, offset=offset, order=order, mode="constant", cval=0.0
    )


def apply_intensity(data: np.ndarray, draw: IntensityDraw) -> np.ndarray:
    """Gamma on a [0,1]-rescaled copy, then additive Gaussian noise."""
    out = np.asarray(data, dtype=np.float32)
    lo, hi = float(out.min()), float(out.max())
    if draw.gamma != 1.0 and hi > lo:
        unit = (out - lo) / (hi - lo)
        out = lo + (hi - lo) * unit**draw.gamma
    if draw.noise_sigma > 0.0:
        noise_rng = np.random.default_rng(draw.noise_seed)
        out = out + draw.noise_sigma * noise_rng.standard_normal(out.shape).astype(np.float32)
    return out.astype(np.float32)


def augment_arrays(
    channels: np.ndarray,
    label: np.ndarray | None,
    spec: AugmentationSpec,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray | None, SpatialDraw]:
    """Augment a (C, X, Y, Z) stack and its label with one spatial draw."""
    spatial = draw_spatial(rng, spec)
    out = np.stack([apply_spatial(ch, spatial, order=1) for ch in channels])
    intensity = [draw_intensity(rng, spec) for _ in channels]
    out = np.stack([apply_intensity(ch, d) for ch, d in zip(out, intensity)])
    lab = None
    if label is not None:
        lab = apply_spatial(label.astype(np.uint8), spatial, order=0).astype(np.uint8)
    return out.astype(np.float32), lab, spatial
