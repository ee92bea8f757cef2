"""Canonical 3D volume, mask, and case data model.

Everything in the toolkit speaks in these types. Voxel axes are fixed as
(left-right, anterior-posterior, inferior-superior); images loaded from disk
are reoriented to LAS before they reach any other module.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nifti

GRID_TOL = 1e-4

# All cases are mapped onto this grid before training or inference:
# 192 x 224 x 32 voxels, 0.9 mm in-plane, 6.0 mm slices, LAS orientation.
REFERENCE_SHAPE = (192, 224, 32)
REFERENCE_SPACING = (0.9, 0.9, 6.0)


class VolumeError(ValueError):
    """Invalid volume, mask, or case construction."""


@dataclass(frozen=True)
class VoxelGrid:
    """Shape, spacing (mm), and voxel-to-world affine of a 3D image."""

    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    affine: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "affine", np.asarray(self.affine, dtype=float))
        if len(self.shape) != 3 or any(n < 1 for n in self.shape):
            raise VolumeError(f"shape must be three entries >= 1, got {self.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise VolumeError(f"spacing must be three positive entries, got {self.spacing}")
        if self.affine.shape != (4, 4):
            raise VolumeError("affine must be 4x4")
        if abs(np.linalg.det(self.affine)) < 1e-12:
            raise VolumeError("affine is not invertible")
        norms = np.linalg.norm(self.affine[:3, :3], axis=0)
        if np.max(np.abs(norms - np.asarray(self.spacing))) > GRID_TOL:
            raise VolumeError(
                f"spacing {self.spacing} disagrees with affine column norms {tuple(norms)}"
            )

    @classmethod
    def las(cls, shape, spacing, origin=(0.0, 0.0, 0.0)) -> "VoxelGrid":
        """Axis-aligned LAS grid: +i toward left (-X world), +j anterior, +k superior."""
        sx, sy, sz = (float(s) for s in spacing)
        affine = np.diag([-sx, sy, sz, 1.0])
        affine[:3, 3] = origin
        return cls(tuple(shape), (sx, sy, sz), affine)

    def same_as(self, other: "VoxelGrid", tol: float = GRID_TOL) -> bool:
        return (
            self.shape == other.shape
            and np.max(np.abs(np.asarray(self.spacing) - other.spacing)) <= tol
            and np.max(np.abs(self.affine - other.affine)) <= tol
        )

    def world_diagonal_mm(self) -> float:
        """Physical extent of the field of view, used as a finite distance penalty."""
        extent = np.asarray(self.shape, dtype=float) * np.asarray(self.spacing)
        return float(np.linalg.norm(extent))


def reference_grid() -> VoxelGrid:
    return VoxelGrid.las(REFERENCE_SHAPE, REFERENCE_SPACING)


@dataclass(frozen=True)
class Volume:
    """Real scalar field on a grid (DWI, ADC, probability data, ...)."""

    grid: VoxelGrid
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.shape != self.grid.shape:
            raise VolumeError(f"data shape {arr.shape} != grid shape {self.grid.shape}")
        if not np.isfinite(arr).all():
            raise VolumeError("volume contains non-finite voxels")
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True)
class BinaryMask:
    """{0,1} field on a grid."""

    grid: VoxelGrid
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.shape != self.grid.shape:
            raise VolumeError(f"mask shape {arr.shape} != grid shape {self.grid.shape}")
        vals = np.unique(arr)
        if not np.isin(vals, (0, 1)).all():
            raise VolumeError(f"mask values must be exactly 0/1, got {vals[:8]}")
        object.__setattr__(self, "data", arr.astype(np.uint8))

    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class ProbabilityMap:
    """[0,1]-valued field on a grid."""

    grid: VoxelGrid
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.shape != self.grid.shape:
            raise VolumeError(f"data shape {arr.shape} != grid shape {self.grid.shape}")
        if not np.isfinite(arr).all():
            raise VolumeError("probability map contains non-finite voxels")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise VolumeError(f"probabilities outside [0,1]: [{arr.min()}, {arr.max()}]")
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True)
class CaseRecord:
    """One participant: DWI + ADC channels, optional label, and a domain tag."""

    id: str
    dwi: Volume
    adc: Volume
    label: BinaryMask | None = None
    domain: str = "source"

    def __post_init__(self):
        if self.domain not in ("source", "target"):
            raise VolumeError(f"domain must be 'source' or 'target', got {self.domain!r}")
        if not self.dwi.grid.same_as(self.adc.grid):
            raise VolumeError(f"case {self.id}: DWI and ADC grids differ")
        if self.label is not None and not self.dwi.grid.same_as(self.label.grid):
            raise VolumeError(f"case {self.id}: label grid differs from image grid")

    @property
    def grid(self) -> VoxelGrid:
        return self.dwi.grid


def _grid_from(data: np.ndarray, affine: np.ndarray) -> VoxelGrid:
    spacing = tuple(float(s) for s in np.linalg.norm(affine[:3, :3], axis=0))
    return VoxelGrid(data.shape, spacing, affine)


def load_volume(path: str | Path) -> Volume:
    """Load a 3D NIfTI image as a Volume, reoriented to LAS."""
    data, affine = nifti.read(path)
    data, affine = nifti.to_las(data, affine)
    if not np.isfinite(data).all():
        raise VolumeError(f"{path}: image contains non-finite voxels")
    return Volume(_grid_from(data, affine), data)


def load_mask(path: str | Path) -> BinaryMask:
    """Load a NIfTI image whose voxels are exactly 0/1 as a BinaryMask."""
    data, affine = nifti.read(path)
    data, affine = nifti.to_las(data, affine)
    vals = np.unique(data)
    if not np.isin(vals, (0, 1)).all():
        raise VolumeError(f"{path}: mask values not in {{0,1}}: {vals[:8]}")
    return BinaryMask(_grid_from(data, affine), data)


def load_probability_map(path: str | Path) -> ProbabilityMap:
    data, affine = nifti.read(path)
    data, affine = nifti.to_las(data, affine)
    return ProbabilityMap(_grid_from(data, affine), data)


def save_volume(obj: Volume | BinaryMask | ProbabilityMap, path: str | Path) -> None:
    """Write any image type to NIfTI; masks are stored as uint8, the rest float32."""
    dtype = np.uint8 if isinstance(obj, BinaryMask) else np.float32
    nifti.write(path, obj.data, obj.grid.affine, dtype=dtype)


def voxel_volume_ml(grid: VoxelGrid) -> float:
    """Volume of one voxel in milliliters (spacing product / 1000)."""
    return float(np.prod(grid.spacing)) / 1000.0


def case_channels(case: CaseRecord) -> np.ndarray:
    """Stack DWI and ADC into the (2, X, Y, Z) network input layout."""
    return np.stack([case.dwi.data, case.adc.data]).astype(np.float32)
