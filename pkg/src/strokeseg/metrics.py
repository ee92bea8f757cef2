"""Segmentation metrics: DSC, AVD, ALD, lesion F1, HD95, precision/recall.

Voxel-level metrics operate on whole masks; lesion-level metrics operate on
26-connected components. Distances are Euclidean in millimeters using the
grid spacing (exact distance transform, no chamfer approximation).

Empty-mask conventions (kept explicit so every metric stays finite):
  dice(empty, empty) = 1, lesion_f1(empty, empty) = 1,
  hd95 with exactly one empty mask = the grid's world-space diagonal,
  hd95(empty, empty) = 0,
  precision with empty prediction = 1 if the ground truth is empty else 0,
  recall symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import BinaryMask, VolumeError, voxel_volume_ml

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=int)


@dataclass(frozen=True)
class LesionComponents:
    """Connected-component decomposition of a mask."""

    labels: np.ndarray          # int label map, 0 = background
    count: int
    voxel_counts: tuple[int, ...]
    volumes_ml: tuple[float, ...]


@dataclass
class MetricRecord:
    """Per-case metric values for one model."""

    case_id: str
    model_id: str
    dsc: float
    avd: float
    ald: int
    f1: float
    hd95: float
    precision: float
    recall: float
    stratum: str = ""

    def value(self, metric: str) -> float:
        return float(getattr(self, metric))


METRIC_NAMES = ("dsc", "avd", "ald", "f1", "hd95")
# higher is better for overlap/detection scores, lower for differences/distances
HIGHER_IS_BETTER = {"dsc": True, "avd": False, "ald": False, "f1": True, "hd95": False}


def _check_grids(pred: BinaryMask, gt: BinaryMask) -> None:
    if not pred.grid.same_as(gt.grid):
        raise VolumeError("prediction and ground-truth grids differ")


def dice(pred: BinaryMask, gt: BinaryMask) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both masks are empty."""
    _check_grids(pred, gt)
    p, g = pred.data.astype(bool), gt.data.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def avd(pred: BinaryMask, gt: BinaryMask) -> float:
    """Absolute volume difference in ml."""
    _check_grids(pred, gt)
    return abs(pred.count() - gt.count()) * voxel_volume_ml(pred.grid)


def connected_components(mask: BinaryMask, connectivity: np.ndarray = CONNECTIVITY_26) -> LesionComponents:
    """Label lesions under 26-connectivity; labels follow scan order."""
    labels, count = ndimage.label(mask.data, structure=connectivity)
    counts = ndimage.sum_labels(np.ones_like(labels), labels, index=range(1, count + 1))
    vox_ml = voxel_volume_ml(mask.grid)
    voxel_counts = tuple(int(c) for c in counts)
    return LesionComponents(labels, int(count), voxel_counts, tuple(c * vox_ml for c in voxel_counts))


def ald(pred: BinaryMask, gt: BinaryMask) -> int:
    """Absolute difference in lesion (connected component) counts."""
    _check_grids(pred, gt)
    return abs(connected_components(pred).count - connected_components(gt).count)


def lesion_f1(pred: BinaryMask, gt: BinaryMask) -> float:
    """Detection F1 over lesion components; one overlapping voxel counts as a hit."""
    _check_grids(pred, gt)
    pc = connected_components(pred)
    gc = connected_components(gt)
    if pc.count == 0 and gc.count == 0:
        return 1.0
    pred_bool = pred.data.astype(bool)
    gt_bool = gt.data.astype(bool)
    tp = sum(1 for lab in range(1, gc.count + 1) if pred_bool[gc.labels == lab].any())
    fn = gc.count - tp
    fp = sum(1 for lab in range(1, pc.count + 1) if not gt_bool[pc.labels == lab].any())
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 0.0
    return 2 * tp / denom


def _directed_distances(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """d(a, dst) in mm for every voxel a of src (exact EDT, anisotropic spacing)."""
    dt = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return dt[src]


def hd95(pred: BinaryMask, gt: BinaryMask) -> float:
    """95th-percentile symmetric Hausdorff distance in mm.

    max over both directions of the 0.95 quantile (linear interpolation
    between order statistics) of point-to-set distances taken over all
    mask voxels.
    """
    _check_grids(pred, gt)
    p, g = pred.data.astype(bool), gt.data.astype(bool)
    p_empty, g_empty = not p.any(), not g.any()
    if p_empty and g_empty:
        return 0.0
    if p_empty or g_empty:
        return pred.grid.world_diagonal_mm()
    spacing = pred.grid.spacing
    d_pg = np.quantile(_directed_distances(p, g, spacing), 0.95)
    d_gp = np.quantile(_directed_distances(g, p, spacing), 0.95)
    return float(max(d_pg, d_gp))


def precision_recall(pred: BinaryMask, gt: BinaryMask) -> tuple[float, float]:
    """Voxel-level precision and recall."""
    _check_grids(pred, gt)
    p, g = pred.data.astype(bool), gt.data.astype(bool)
    inter = int((p & g).sum())
    np_, ng = int(p.sum()), int(g.sum())
    precision = (1.0 if ng == 0 else 0.0) if np_ == 0 else inter / np_
    recall = (1.0 if np_ == 0 else 0.0) if ng == 0 else inter / ng
    return precision, recall


def evaluate_pair(pred: BinaryMask, gt: BinaryMask, case_id: str, model_id: str) -> MetricRecord:
    """All metrics for one (prediction, ground truth) pair."""
    prec, rec = precision_recall(pred, gt)
    return MetricRecord(
        case_id=case_id,
        model_id=model_id,
        dsc=dice(pred, gt),
        avd=avd(pred, gt),
        ald=ald(pred, gt),
        f1=lesion_f1(pred, gt),
        hd95=hd95(pred, gt),
        precision=prec,
        recall=rec,
        stratum=lesion_size_stratum(gt),
    )


def lesion_size_stratum(gt: BinaryMask) -> str:
    """Small (<5 ml), medium (>=5 and <20 ml), or large (>=20 ml) by total lesion volume."""
    total_ml = gt.count() * voxel_volume_ml(gt.grid)
    if total_ml < 5.0:
        return "small"
    if total_ml < 20.0:
        return "medium"
    return "large"
