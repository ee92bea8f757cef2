"""Synthetic desk-scale dataset generator.

Head phantoms with spherical "lesions" rendered into DWI/ADC channel pairs:
lesions are hyperintense on DWI and hypointense on ADC at the same sites, and
the emitted label is exactly the rendered lesion support. A configurable
global intensity bias and contrast scale separate a source domain from a
shifted target domain for adaptation experiments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .volume import BinaryMask, CaseRecord, VoxelGrid, Volume, save_volume

# desk grid: same 6:7:1 in-plane aspect as the reference grid, thick slices
DESK_SHAPE = (48, 56, 8)
DESK_SPACING = (1.0, 1.0, 4.0)


class SynthesisError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    grid: VoxelGrid = None
    lesion_count: tuple[int, int] = (1, 3)        # inclusive range
    lesion_radius_mm: tuple[float, float] = (3.0, 8.0)
    lesion_contrast: float = 1.0                  # added to DWI, subtracted from ADC
    noise_level: float = 0.05
    intensity_bias: float = 0.0                   # domain shift: global offset
    contrast_scale: float = 1.0                   # domain shift: multiplicative

    def __post_init__(self):
        if self.grid is None:
            object.__setattr__(self, "grid", VoxelGrid.las(DESK_SHAPE, DESK_SPACING))
        if self.lesion_count[0] < 0 or self.lesion_count[0] > self.lesion_count[1]:
            raise SynthesisError("lesion_count must be an ordered non-negative range")
        if self.lesion_radius_mm[0] <= 0 or self.lesion_radius_mm[0] > self.lesion_radius_mm[1]:
            raise SynthesisError("lesion_radius_mm must be an ordered positive range")


def _coords_mm(grid: VoxelGrid) -> np.ndarray:
    axes = [np.arange(n) * s for n, s in zip(grid.shape, grid.spacing)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _soft_ball(coords_mm: np.ndarray, center_mm, radius_mm: float, edge_mm: float) -> np.ndarray:
    dist = np.linalg.norm(coords_mm - np.asarray(center_mm), axis=-1)
    return 1.0 / (1.0 + np.exp((dist - radius_mm) / edge_mm))


def generate_case(spec: PhantomSpec, rng: np.random.Generator, case_id: str = "case", domain: str = "source") -> CaseRecord:
    """One phantom: brain ellipsoid plus lesions; the label is the lesion support."""
    grid = spec.grid
    coords = _coords_mm(grid)
    extent = np.asarray(grid.shape) * np.asarray(grid.spacing)
    center = extent / 2.0
    brain_radii = extent * np.array([0.38, 0.38, 0.42])
    brain_dist = np.linalg.norm((coords - center) / brain_radii, axis=-1)
    edge = 0.75 * min(grid.spacing)
    brain = 1.0 / (1.0 + np.exp((brain_dist - 1.0) / 0.05))

    n_lesions = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    lesion = np.zeros(grid.shape)
    placed = 0
    attempts = 0
    while placed < n_lesions:
        attempts += 1
        if attempts > 50 * max(n_lesions, 1):
            raise SynthesisError(
                f"could not place {n_lesions} lesions after {attempts} attempts; spec too crowded"
            )
        radius = float(rng.uniform(*spec.lesion_radius_mm))
        # keep centers inside the brain ellipsoid with margin for the radius
        offset = rng.uniform(-0.6, 0.6, size=3) * brain_radii
        c = center + offset
        norm_pos = np.linalg.norm(offset / brain_radii)
        if norm_pos > 0.75:
            continue
        lesion = np.maximum(lesion, _soft_ball(coords, c, radius, edge))
        placed += 1

    label = (lesion > 0.5).astype(np.uint8)
    dwi = brain * 1.0 + spec.lesion_contrast * lesion
    adc = brain * 1.0 - spec.lesion_contrast * lesion
    if spec.noise_level > 0:
        dwi = dwi + spec.noise_level * rng.standard_normal(grid.shape)
        adc = adc + spec.noise_level * rng.standard_normal(grid.shape)
    dwi = dwi * spec.contrast_scale + spec.intensity_bias
    adc = adc * spec.contrast_scale + spec.intensity_bias

    return CaseRecord(
        id=case_id,
        dwi=Volume(grid, dwi),
        adc=Volume(grid, adc),
        label=BinaryMask(grid, label),
        domain=domain,
    )


@dataclass(frozen=True)
class SplitSpec:
    """Domain-shift parameters applied to target-domain phantoms."""

    target_intensity_bias: float = 0.3
    target_contrast_scale: float = 1.25


def generate_split(
    spec: PhantomSpec,
    n_source_labeled: int,
    n_target_unlabeled: int,
    n_target_labeled_test: int,
    seed: int,
    shift: SplitSpec = SplitSpec(),
) -> dict[str, list[CaseRecord]]:
    """Source-labeled / target-unlabeled / target-labeled-test phantom splits."""
    target_spec = replace(
        spec,
        intensity_bias=spec.intensity_bias + shift.target_intensity_bias,
        contrast_scale=spec.contrast_scale * shift.target_contrast_scale,
    )
    splits: dict[str, list[CaseRecord]] = {"source": [], "target_unlabeled": [], "test": []}
    for i in range(n_source_labeled):
        rng = np.random.default_rng([seed, 1, i])
        splits["source"].append(generate_case(spec, rng, f"src-{i:04d}", domain="source"))
    for i in range(n_target_unlabeled):
        rng = np.random.default_rng([seed, 2, i])
        case = generate_case(target_spec, rng, f"tgt-{i:04d}", domain="target")
        splits["target_unlabeled"].append(replace_label(case, None))
    for i in range(n_target_labeled_test):
        rng = np.random.default_rng([seed, 3, i])
        splits["test"].append(generate_case(target_spec, rng, f"tst-{i:04d}", domain="target"))
    return splits


def replace_label(case: CaseRecord, label) -> CaseRecord:
    return CaseRecord(id=case.id, dwi=case.dwi, adc=case.adc, label=label, domain=case.domain)


def write_dataset(splits: dict[str, list[CaseRecord]], out_dir: str | Path) -> Path:
    """Write NIfTI files plus a manifest.json; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for split, cases in splits.items():
        for case in cases:
            dwi_path = out_dir / f"{case.id}_dwi.nii.gz"
            adc_path = out_dir / f"{case.id}_adc.nii.gz"
            save_volume(case.dwi, dwi_path)
            save_volume(case.adc, adc_path)
            entry = {
                "id": case.id,
                "split": split,
                "domain": case.domain,
                "dwi": dwi_path.name,
                "adc": adc_path.name,
                "label": None,
            }
            if case.label is not None:
                label_path = out_dir / f"{case.id}_label.nii.gz"
                save_volume(case.label, label_path)
                entry["label"] = label_path.name
            entries.append(entry)
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"cases": entries}, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(manifest_path: str | Path, splits: tuple[str, ...] | None = None) -> list[CaseRecord]:
    """Load CaseRecords listed in a manifest (optionally filtered by split)."""
    from .volume import load_mask, load_volume

    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    payload = json.loads(manifest_path.read_text())
    ids = [e["id"] for e in payload["cases"]]
    if len(ids) != len(set(ids)):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise SynthesisError(f"duplicate case ids in manifest: {dupes}")
    cases = []
    for entry in payload["cases"]:
        if splits is not None and entry["split"] not in splits:
            continue
        label = load_mask(root / entry["label"]) if entry.get("label") else None
        cases.append(
            CaseRecord(
                id=entry["id"],
                dwi=load_volume(root / entry["dwi"]),
                adc=load_volume(root / entry["adc"]),
                label=label,
                domain=entry["domain"],
            )
        )
    return cases
