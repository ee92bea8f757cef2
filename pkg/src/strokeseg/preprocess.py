"""Preprocessing pipeline: skull-strip, rigid registration, normalization.

Brain extraction and registration are delegated to external executables
behind a process contract, so stubs can stand in for the real tools:

    <tool> <in.nii.gz> <out.nii.gz> [<matrix.txt>]

run with a fresh scratch directory as the working directory. For
registration the reference volume is materialized as ``reference.nii.gz``
in that directory, and the 4x4 rigid matrix (row-major, whitespace
separated, world-mm to world-mm) is exchanged through the third argument.
A nonzero exit raises AdapterFailure carrying the tool's stderr.
"""

from __future__ import annotations

import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import (
    BinaryMask,
    CaseRecord,
    Volume,
    VolumeError,
    VoxelGrid,
    load_mask,
    load_volume,
    save_volume,
)

RIGID_TOL = 1e-4
CLIP_RANGE = (-5.0, 5.0)


class AdapterFailure(RuntimeError):
    """External tool failed; carries the captured stderr."""

    def __init__(self, message: str, stderr: str = ""):
        super().__init__(message + (f"\n--- tool stderr ---\n{stderr}" if stderr else ""))
        self.stderr = stderr


@dataclass(frozen=True)
class RigidTransform:
    """World-mm to world-mm rigid map (rotation + translation)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (4, 4):
            raise VolumeError("rigid transform must be 4x4")
        lin = m[:3, :3]
        if np.max(np.abs(lin @ lin.T - np.eye(3))) > RIGID_TOL:
            raise VolumeError("transform linear part is not orthogonal")
        if abs(np.linalg.det(lin) - 1.0) > RIGID_TOL:
            raise VolumeError("transform determinant is not +1")
        if np.max(np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > RIGID_TOL:
            raise VolumeError("bottom row must be (0, 0, 0, 1)")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(4))

    def inverse(self) -> "RigidTransform":
        return RigidTransform(np.linalg.inv(self.matrix))


def write_matrix(transform: RigidTransform, path: str | Path) -> None:
    np.savetxt(path, transform.matrix, fmt="%.10f")


def read_matrix(path: str | Path) -> RigidTransform:
    return RigidTransform(np.loadtxt(path))


@dataclass(frozen=True)
class PreprocessResult:
    dwi_norm: Volume
    adc_norm: Volume
    brain_mask: BinaryMask
    transform: RigidTransform
    native_grid: VoxelGrid
    label: BinaryMask | None = None


def _run_tool(tool: str, args: list[str], cwd: Path) -> None:
    proc = subprocess.run(
        [str(tool)] + args, cwd=cwd, capture_output=True, text=True
    )
    if proc.returncode != 0:
        raise AdapterFailure(
            f"{tool} exited with code {proc.returncode}", stderr=proc.stderr
        )


def skull_strip(dwi: Volume, tool: str) -> BinaryMask:
    """Run the brain-extraction adapter on the DWI; returns a nonempty mask."""
    with tempfile.TemporaryDirectory(prefix="skullstrip-") as tmp:
        tmp = Path(tmp)
        in_path, out_path = tmp / "in.nii.gz", tmp / "out.nii.gz"
        save_volume(dwi, in_path)
        _run_tool(tool, [in_path.name, out_path.name], cwd=tmp)
        if not out_path.exists():
            raise AdapterFailure(f"{tool} produced no output mask")
        mask = load_mask(out_path)
    if not mask.grid.same_as(dwi.grid):
        raise AdapterFailure(f"{tool} returned a mask on a different grid")
    if mask.count() == 0:
        raise AdapterFailure(f"{tool} returned an empty brain mask")
    return mask


def register_to_reference(
    dwi: Volume, reference: Volume, tool: str
) -> tuple[Volume, RigidTransform]:
    """Run the registration adapter; returns the resampled DWI and the rigid map."""
    with tempfile.TemporaryDirectory(prefix="register-") as tmp:
        tmp = Path(tmp)
        save_volume(dwi, tmp / "in.nii.gz")
        save_volume(reference, tmp / "reference.nii.gz")
        _run_tool(tool, ["in.nii.gz", "out.nii.gz", "matrix.txt"], cwd=tmp)
        if not (tmp / "out.nii.gz").exists() or not (tmp / "matrix.txt").exists():
            raise AdapterFailure(f"{tool} did not produce both output volume and matrix")
        registered = load_volume(tmp / "out.nii.gz")
        transform = read_matrix(tmp / "matrix.txt")  # validates rigidity
    if not registered.grid.same_as(reference.grid):
        raise AdapterFailure(f"{tool} output is not on the reference grid")
    return registered, transform


def normalize_zscore_clip(v: Volume, brain: BinaryMask) -> Volume:
    """Z-score over brain voxels (population std), clip to [-5, 5], zero outside."""
    if not v.grid.same_as(brain.grid):
        raise VolumeError("volume and brain mask grids differ")
    inside = brain.data.astype(bool)
    if not inside.any():
        raise VolumeError("empty brain mask")
    values = v.data[inside].astype(np.float64)
    mu = values.mean()
    sigma = values.std()  # population standard deviation
    if sigma == 0.0:
        raise VolumeError("zero in-brain variance; cannot z-score")
    out = np.zeros(v.grid.shape, dtype=np.float32)
    out[inside] = np.clip((v.data[inside] - mu) / sigma, *CLIP_RANGE)
    return Volume(v.grid, out)


def _voxel_map(src_grid: VoxelGrid, dst_grid: VoxelGrid, world_map: np.ndarray) -> np.ndarray:
    """Matrix taking dst voxel indices to src voxel indices through world_map."""
    return np.linalg.inv(src_grid.affine) @ world_map @ dst_grid.affine


def resample_volume(v: Volume, transform: RigidTransform, ref_grid: VoxelGrid, order: int = 1) -> Volume:
    """Resample a native volume onto the reference grid under the rigid map."""
    m = _voxel_map(v.grid, ref_grid, np.linalg.inv(transform.matrix))
    data = ndimage.affine_transform(
        v.data.astype(np.float64), m[:3, :3], offset=m[:3, 3],
        output_shape=ref_grid.shape, order=order, mode="constant", cval=0.0,
    )
    return Volume(ref_grid, data)


def resample_mask(mask: BinaryMask, transform: RigidTransform, ref_grid: VoxelGrid) -> BinaryMask:
    m = _voxel_map(mask.grid, ref_grid, np.linalg.inv(transform.matrix))
    data = ndimage.affine_transform(
        mask.data, m[:3, :3], offset=m[:3, 3],
        output_shape=ref_grid.shape, order=0, mode="constant", cval=0,
    )
    return BinaryMask(ref_grid, data)


def map_mask_to_native(mask: BinaryMask, transform: RigidTransform, native: VoxelGrid) -> BinaryMask:
    """Pull a reference-grid mask back to native space (nearest-neighbor)."""
    m = _voxel_map(mask.grid, native, transform.matrix)
    data = ndimage.affine_transform(
        mask.data, m[:3, :3], offset=m[:3, 3],
        output_shape=native.shape, order=0, mode="constant", cval=0,
    )
    return BinaryMask(native, data)


def preprocess_case(
    case: CaseRecord,
    reference: Volume,
    skullstrip_tool: str,
    register_tool: str,
) -> PreprocessResult:
    """skull-strip -> rigid registration -> z-score+clip, for one case.

    The registration estimated on the DWI is reused for the ADC, the brain
    mask, and the label when present.
    """
    native_grid = case.grid
    brain_native = skull_strip(case.dwi, skullstrip_tool)
    stripped_dwi = Volume(native_grid, case.dwi.data * brain_native.data)
    stripped_adc = Volume(native_grid, case.adc.data * brain_native.data)

    dwi_reg, transform = register_to_reference(stripped_dwi, reference, register_tool)
    adc_reg = resample_volume(stripped_adc, transform, reference.grid, order=1)
    brain_ref = resample_mask(brain_native, transform, reference.grid)
    if brain_ref.count() == 0:
        raise AdapterFailure("brain mask is empty after registration")

    label_ref = None
    if case.label is not None:
        label_ref = resample_mask(case.label, transform, reference.grid)

    return PreprocessResult(
        dwi_norm=normalize_zscore_clip(dwi_reg, brain_ref),
        adc_norm=normalize_zscore_clip(adc_reg, brain_ref),
        brain_mask=brain_ref,
        transform=transform,
        native_grid=native_grid,
        label=label_ref,
    )
