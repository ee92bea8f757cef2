"""Voxel-wise error maps over a case set.

Four maps on a common grid: false-positive and false-negative proportions,
and the mean distance (mm) of FP voxels to the ground-truth mask and of FN
voxels to the predicted mask. Non-error voxels contribute 0 to the distance
means. Maps are Gaussian-smoothed (FWHM given in mm) and thresholded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import BinaryMask, Volume, VolumeError

PROPORTION_THRESHOLD = 0.01
DISTANCE_THRESHOLD_MM = 0.2
DEFAULT_FWHM_MM = 4.0


def fwhm_to_sigma(fwhm_mm: float) -> float:
    """FWHM = 2*sqrt(2*ln 2) * sigma."""
    return fwhm_mm / (2.0 * np.sqrt(2.0 * np.log(2.0)))


@dataclass(frozen=True)
class VoxelwiseMaps:
    fp_proportion: Volume
    fn_proportion: Volume
    fp_mean_hd: Volume
    fn_mean_hd: Volume

    def items(self):
        return (
            ("fp_proportion", self.fp_proportion),
            ("fn_proportion", self.fn_proportion),
            ("fp_mean_hd", self.fp_mean_hd),
            ("fn_mean_hd", self.fn_mean_hd),
        )


def _distance_to_mask(mask: np.ndarray, grid) -> np.ndarray:
    """Distance in mm from every voxel to the nearest mask voxel."""
    if not mask.any():
        # finite fallback mirroring the hd95 empty-mask penalty
        return np.full(mask.shape, grid.world_diagonal_mm())
    return ndimage.distance_transform_edt(~mask, sampling=grid.spacing)


def accumulate_maps(cases: list[tuple[BinaryMask, BinaryMask]]) -> tuple[np.ndarray, ...]:
    """Unsmoothed per-voxel means over cases of FP, FN, FP-distance, FN-distance."""
    if not cases:
        raise VolumeError("no cases supplied")
    grid = cases[0][0].grid
    fp_sum = np.zeros(grid.shape)
    fn_sum = np.zeros(grid.shape)
    fp_hd_sum = np.zeros(grid.shape)
    fn_hd_sum = np.zeros(grid.shape)
    for pred, gt in cases:
        if not (pred.grid.same_as(grid) and gt.grid.same_as(grid)):
            raise VolumeError("all cases must share one grid")
        p, g = pred.data.astype(bool), gt.data.astype(bool)
        fp = p & ~g
        fn = ~p & g
        fp_sum += fp
        fn_sum += fn
        if fp.any():
            fp_hd_sum[fp] += _distance_to_mask(g, grid)[fp]
        if fn.any():
            fn_hd_sum[fn] += _distance_to_mask(p, grid)[fn]
    n = len(cases)
    return fp_sum / n, fn_sum / n, fp_hd_sum / n, fn_hd_sum / n


def voxelwise_maps(
    cases: list[tuple[BinaryMask, BinaryMask]],
    fwhm_mm: float = DEFAULT_FWHM_MM,
    smooth: bool = True,
) -> VoxelwiseMaps:
    """Smoothed, thresholded error maps over (prediction, ground-truth) pairs."""
    grid = cases[0][0].grid
    fp_prop, fn_prop, fp_hd, fn_hd = accumulate_maps(cases)
    if smooth:
        sigma_mm = fwhm_to_sigma(fwhm_mm)
        sigma_vox = [sigma_mm / s for s in grid.spacing]
        blur = lambda a: ndimage.gaussian_filter(a, sigma=sigma_vox, mode="reflect", truncate=4.0)
        fp_prop, fn_prop, fp_hd, fn_hd = (blur(a) for a in (fp_prop, fn_prop, fp_hd, fn_hd))
    fp_prop = np.where(fp_prop < PROPORTION_THRESHOLD, 0.0, fp_prop)
    fn_prop = np.where(fn_prop < PROPORTION_THRESHOLD, 0.0, fn_prop)
    fp_hd = np.where(fp_hd < DISTANCE_THRESHOLD_MM, 0.0, fp_hd)
    fn_hd = np.where(fn_hd < DISTANCE_THRESHOLD_MM, 0.0, fn_hd)
    return VoxelwiseMaps(
        Volume(grid, fp_prop),
        Volume(grid, fn_prop),
        Volume(grid, fp_hd),
        Volume(grid, fn_hd),
    )
