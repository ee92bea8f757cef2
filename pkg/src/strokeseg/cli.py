"""Command-line entry point.

Subcommands cover the full workflow: synthetic data generation, preprocessing
through external adapters, supervised training, mean-teacher adaptation,
single-model and ensemble inference, and evaluation/ranking/error-map
reporting. Report commands write matplotlib figures next to their CSV and
NIfTI outputs.

Exit codes: 0 success, 1 runtime failure (diagnostic on stderr), 2 usage
error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import figures
from .augment import AugmentationSpec
from .ensemble import ensemble_predict, read_ensemble_spec
from .losses import LossConfig
from .metrics import MetricRecord, evaluate_pair
from .mean_teacher import MTConfig, train_mt
from .network import NetworkConfig, load_checkpoint, save_checkpoint, save_mt_checkpoint
from .preprocess import (
    map_mask_to_native,
    preprocess_case,
    read_matrix,
    write_matrix,
)
from .ranking import case_level_ranking, render_report
from .synthetic import PhantomSpec, generate_split, write_dataset, read_dataset
from .training import TrainConfig, infer, train
from .volume import (
    CaseRecord,
    Volume,
    VoxelGrid,
    load_mask,
    load_volume,
    reference_grid,
    save_volume,
)
from .voxelmaps import DEFAULT_FWHM_MM, voxelwise_maps


class CliError(RuntimeError):
    pass


def _strict_fields(payload: dict, cls, section: str) -> dict:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise CliError(f"unknown keys in config section {section!r}: {sorted(unknown)}")
    return payload


def _tupled(payload: dict, keys: tuple[str, ...]) -> dict:
    return {k: tuple(v) if k in keys and isinstance(v, list) else v for k, v in payload.items()}


def load_run_config(path: str | Path):
    """Parse the JSON run config (network/train/loss/augmentation/mt sections)."""
    raw = json.loads(Path(path).read_text())
    known_sections = {"network", "train", "loss", "augmentation", "mt"}
    unknown = set(raw) - known_sections
    if unknown:
        raise CliError(f"unknown config sections: {sorted(unknown)}")

    net = NetworkConfig(**_tupled(_strict_fields(raw.get("network", {}), NetworkConfig, "network"), ("encoder_filters",)))
    loss = LossConfig(**_tupled(_strict_fields(raw.get("loss", {}), LossConfig, "loss"), ("ds_weights",)))
    aug = AugmentationSpec(
        **_tupled(
            _strict_fields(raw.get("augmentation", {}), AugmentationSpec, "augmentation"),
            ("max_translation", "noise_sigma_range", "gamma_range"),
        )
    )
    train_section = dict(raw.get("train", {}))
    _strict_fields({k: v for k, v in train_section.items()}, TrainConfig, "train")
    train_cfg = TrainConfig(loss=loss, augmentation=aug, **{k: v for k, v in train_section.items() if k not in ("loss", "augmentation")})

    # validated here, constructed only by `adapt` (MTConfig cross-checks epochs)
    mt_section = dict(raw.get("mt", {}))
    _strict_fields(mt_section, MTConfig, "mt")
    mt_section.pop("base", None)
    return net, train_cfg, mt_section


def _pmap(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _manifest_path(data: str | Path) -> Path:
    path = Path(data)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise CliError(f"no manifest at {path}")
    return path


# ---------------------------------------------------------------- synth ----

def cmd_synth(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    if len(sizes) != 3:
        raise CliError("--sizes expects three comma-separated counts: source,target,test")
    spec = PhantomSpec()
    if args.spec:
        raw = json.loads(Path(args.spec).read_text())
        grid = None
        if "grid" in raw:
            gspec = raw.pop("grid")
            grid = VoxelGrid.las(tuple(gspec["shape"]), tuple(gspec["spacing"]))
        raw = _tupled(
            _strict_fields(raw, PhantomSpec, "phantom"),
            ("lesion_count", "lesion_radius_mm"),
        )
        spec = PhantomSpec(grid=grid, **{k: v for k, v in raw.items() if k != "grid"})
    splits = generate_split(spec, sizes[0], sizes[1], sizes[2], seed=args.seed)
    manifest = write_dataset(splits, args.out)
    print(f"wrote {sum(len(v) for v in splits.values())} cases to {manifest.parent}")
    return 0


# ----------------------------------------------------------- preprocess ----

def _tool_from(args_value: str | None, env_key: str, what: str) -> str:
    tool = args_value or os.environ.get(env_key)
    if not tool:
        raise CliError(f"no {what} tool configured (flag or ${env_key})")
    return tool


def cmd_preprocess(args) -> int:
    manifest = _manifest_path(args.input)
    cases = read_dataset(manifest)
    if not cases:
        raise CliError("dataset is empty")
    skull_tool = _tool_from(args.skullstrip_tool, "STROKESEG_SKULLSTRIP_TOOL", "skull-strip")
    reg_tool = _tool_from(args.register_tool, "STROKESEG_REGISTER_TOOL", "registration")
    if args.reference:
        reference = load_volume(args.reference)
    else:
        grid = reference_grid()
        reference = Volume(grid, np.zeros(grid.shape, dtype=np.float32))

    raw_entries = {e["id"]: e for e in json.loads(manifest.read_text())["cases"]}
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(case: CaseRecord) -> dict:
        result = preprocess_case(case, reference, skull_tool, reg_tool)
        save_volume(result.dwi_norm, out_dir / f"{case.id}_dwi.nii.gz")
        save_volume(result.adc_norm, out_dir / f"{case.id}_adc.nii.gz")
        save_volume(result.brain_mask, out_dir / f"{case.id}_brain.nii.gz")
        write_matrix(result.transform, out_dir / f"{case.id}_transform.txt")
        entry = {
            "id": case.id,
            "split": raw_entries[case.id]["split"],
            "domain": case.domain,
            "dwi": f"{case.id}_dwi.nii.gz",
            "adc": f"{case.id}_adc.nii.gz",
            "brain": f"{case.id}_brain.nii.gz",
            "transform": f"{case.id}_transform.txt",
            "label": None,
            "native": {
                "shape": list(result.native_grid.shape),
                "spacing": list(result.native_grid.spacing),
                "affine": np.asarray(result.native_grid.affine).tolist(),
            },
        }
        if result.label is not None:
            save_volume(result.label, out_dir / f"{case.id}_label.nii.gz")
            entry["label"] = f"{case.id}_label.nii.gz"
        return entry

    entries = _pmap(one, cases, args.jobs)
    entries.sort(key=lambda e: e["id"])
    (out_dir / "manifest.json").write_text(json.dumps({"cases": entries}, indent=2, sort_keys=True) + "\n")
    print(f"preprocessed {len(entries)} cases into {out_dir}")
    return 0


# ---------------------------------------------------------------- train ----

def cmd_train(args) -> int:
    net_cfg, train_cfg, _ = load_run_config(args.config)
    cases = read_dataset(_manifest_path(args.data), splits=tuple(args.splits.split(",")))
    cases = [c for c in cases if c.label is not None]
    if not cases:
        raise CliError("no labeled cases in the selected splits")
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    model, _ = train(cases, net_cfg, train_cfg, log_path=log_path, checkpoint_dir=args.checkpoint_dir)
    save_checkpoint(model, out, extra={"role": "supervised", "seed": train_cfg.seed})
    print(f"trained on {len(cases)} cases; checkpoint at {out}")
    return 0


def cmd_adapt(args) -> int:
    net_cfg, train_cfg, mt_section = load_run_config(args.config)
    mt_cfg = MTConfig(base=train_cfg, **mt_section)
    if args.consistency_weight is not None:
        mt_cfg = dataclasses.replace(mt_cfg, consistency_weight=args.consistency_weight)
    source = [c for c in read_dataset(_manifest_path(args.data), splits=tuple(args.splits.split(","))) if c.label is not None]
    target = [
        c
        for c in read_dataset(_manifest_path(args.target_data), splits=tuple(args.target_splits.split(",")))
        if c.domain == "target"
    ]
    if not source:
        raise CliError("no labeled source cases")
    if not target:
        raise CliError("no target cases")
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    teacher, student, _, _ = train_mt(source, target, net_cfg, mt_cfg, log_path=log_path)
    save_mt_checkpoint(teacher, student, out, extra={"role": "teacher", "seed": train_cfg.seed})
    print(f"adapted on {len(source)} source / {len(target)} target cases; teacher at {out}")
    return 0


# ---------------------------------------------------------------- infer ----

def _load_prep_cases(data: str | Path, splits: tuple[str, ...] | None):
    manifest = _manifest_path(data)
    root = manifest.parent
    payload = json.loads(manifest.read_text())
    cases = []
    for entry in payload["cases"]:
        if splits is not None and entry["split"] not in splits:
            continue
        label = load_mask(root / entry["label"]) if entry.get("label") else None
        case = CaseRecord(
            id=entry["id"],
            dwi=load_volume(root / entry["dwi"]),
            adc=load_volume(root / entry["adc"]),
            label=label,
            domain=entry["domain"],
        )
        cases.append((case, entry, root))
    return cases


def _write_prediction(case: CaseRecord, entry: dict, root: Path, prob, mask, out_dir: Path, native: bool):
    save_volume(prob, out_dir / f"{case.id}_prob.nii.gz")
    save_volume(mask, out_dir / f"{case.id}_mask.nii.gz")
    if native:
        if "transform" not in entry or entry.get("native") is None:
            raise CliError(f"case {case.id}: no stored transform/native grid for --native")
        transform = read_matrix(root / entry["transform"])
        native_grid = VoxelGrid(
            tuple(entry["native"]["shape"]),
            tuple(entry["native"]["spacing"]),
            np.asarray(entry["native"]["affine"]),
        )
        native_mask = map_mask_to_native(mask, transform, native_grid)
        save_volume(native_mask, out_dir / f"{case.id}_mask_native.nii.gz")


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    rows = _load_prep_cases(args.data, tuple(args.splits.split(",")) if args.splits else None)
    if not rows:
        raise CliError("no cases selected")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(row):
        case, entry, root = row
        prob, mask = infer(model, case)
        _write_prediction(case, entry, root, prob, mask, out_dir, args.native)
        return case.id

    done = _pmap(one, rows, args.jobs)
    print(f"inferred {len(done)} cases into {out_dir}")
    return 0


def cmd_ensemble_infer(args) -> int:
    paths = read_ensemble_spec(args.ensemble_spec)
    models = [(Path(p).stem, load_checkpoint(p)) for p in paths]
    rows = _load_prep_cases(args.data, tuple(args.splits.split(",")) if args.splits else None)
    if not rows:
        raise CliError("no cases selected")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for case, entry, root in rows:
        prob, mask = ensemble_predict(models, case)
        _write_prediction(case, entry, root, prob, mask, out_dir, args.native)
    print(f"ensemble ({len(models)} members) inferred {len(rows)} cases into {out_dir}")
    return 0


# ------------------------------------------------------------- evaluate ----

def _case_id_from(path: Path) -> str:
    name = path.name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            name = name[: -len(ext)]
            break
    for suffix in ("_mask_native", "_mask", "_label", "_prob", "_pred"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def _collect_masks(directory: str | Path, role: str) -> dict[str, Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise CliError(f"{directory} is not a directory")
    preferred = {"pred": ("_mask",), "gt": ("_label", "_mask")}[role]
    found: dict[str, Path] = {}
    for path in sorted(directory.glob("*.nii*")):
        stem = path.name.split(".nii")[0]
        if stem.endswith(("_prob", "_dwi", "_adc", "_brain", "_mask_native")):
            continue
        cid = _case_id_from(path)
        is_preferred = any(stem.endswith(s) for s in preferred)
        if cid not in found or is_preferred:
            found[cid] = path
    if not found:
        raise CliError(f"no masks found in {directory}")
    return found


def _paired_records(pred_dir: Path, gt_dir: Path, model_id: str, jobs: int) -> list[MetricRecord]:
    preds = _collect_masks(pred_dir, "pred")
    gts = _collect_masks(gt_dir, "gt")
    shared = sorted(set(preds) & set(gts))
    if not shared:
        raise CliError(f"no case ids shared between {pred_dir} and {gt_dir}")
    unmatched = sorted(set(preds) - set(gts))
    if unmatched:
        raise CliError(f"no ground truth for predicted cases: {unmatched}")

    def one(cid: str) -> MetricRecord:
        return evaluate_pair(load_mask(preds[cid]), load_mask(gts[cid]), cid, model_id)

    return _pmap(one, shared, jobs)


def _write_metrics_csv(records: list[MetricRecord], path: Path) -> None:
    cols = ("case_id", "model_id", "dsc", "avd_ml", "ald", "f1", "hd95", "precision", "recall", "stratum")
    lines = [",".join(cols)]
    for r in sorted(records, key=lambda r: (r.model_id, r.case_id)):
        lines.append(
            f"{r.case_id},{r.model_id},{r.dsc:.6f},{r.avd:.6f},{r.ald},"
            f"{r.f1:.6f},{r.hd95:.6f},{r.precision:.6f},{r.recall:.6f},{r.stratum}"
        )
    path.write_text("\n".join(lines) + "\n")


def _parse_strata(value: str | None) -> set[str] | None:
    if not value:
        return None
    strata = {s.strip() for s in value.split(",") if s.strip()}
    bad = strata - {"small", "medium", "large"}
    if bad:
        raise CliError(f"unknown strata {sorted(bad)}; expected small, medium, large")
    return strata


def _filter_strata(records: list[MetricRecord], strata: set[str] | None) -> list[MetricRecord]:
    if strata is None:
        return records
    kept = [r for r in records if r.stratum in strata]
    if not kept:
        raise CliError(f"no cases in strata {sorted(strata)}")
    return kept


def cmd_evaluate(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_id = args.model_id or Path(args.pred_dir).name
    records = _paired_records(Path(args.pred_dir), Path(args.gt_dir), model_id, args.jobs)
    records = _filter_strata(records, _parse_strata(args.strata))
    _write_metrics_csv(records, out_dir / "metrics.csv")
    figures.metric_boxplots(records, out_dir / "metrics.png")
    print(f"evaluated {len(records)} cases -> {out_dir / 'metrics.csv'}")
    return 0


def cmd_rank(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    pred_dirs = [Path(p) for p in args.pred_dirs.split(",")]
    records: list[MetricRecord] = []
    for pred_dir in pred_dirs:
        records.extend(_paired_records(pred_dir, Path(args.gt_dir), pred_dir.name, args.jobs))
    records = _filter_strata(records, _parse_strata(args.strata))
    table = case_level_ranking(records)
    report = render_report(table)
    (out_dir / "ranking_report.txt").write_text(report)
    _write_metrics_csv(records, out_dir / "metrics.csv")
    figures.mean_rank_chart(table, out_dir / "mean_rank.png")
    figures.metric_boxplots(records, out_dir / "metrics.png")
    sys.stdout.write(report)
    return 0


def cmd_maps(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    preds = _collect_masks(Path(args.pred_dir), "pred")
    gts = _collect_masks(Path(args.gt_dir), "gt")
    shared = sorted(set(preds) & set(gts))
    if not shared:
        raise CliError("no shared cases between prediction and ground-truth dirs")
    pairs = [(load_mask(preds[cid]), load_mask(gts[cid])) for cid in shared]
    strata = _parse_strata(args.strata)
    if strata is not None:
        from .metrics import lesion_size_stratum

        pairs = [(p, g) for p, g in pairs if lesion_size_stratum(g) in strata]
        if not pairs:
            raise CliError(f"no cases in strata {sorted(strata)}")
    maps = voxelwise_maps(pairs, fwhm_mm=args.fwhm)
    for name, vol in maps.items():
        save_volume(vol, out_dir / f"{name}.nii.gz")
        figures.map_montage(vol, out_dir / f"{name}.png", title=name)
    print(f"wrote 4 voxel-wise maps over {len(pairs)} cases to {out_dir}")
    return 0


# ----------------------------------------------------------------- main ----

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="strokeseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--sizes", required=True, help="source,target-unlabeled,test counts")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", help="phantom spec JSON")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="skull-strip, register, and normalize a dataset")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reference", help="reference NIfTI (default: built-in zero reference grid)")
    p.add_argument("--skullstrip-tool")
    p.add_argument("--register-tool")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="supervised training")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits", default="source")
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--checkpoint-dir", help="also archive the weights after every epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="mean-teacher domain adaptation")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits", default="source")
    p.add_argument("--target-data", required=True)
    p.add_argument("--target-splits", default="target_unlabeled")
    p.add_argument("--consistency-weight", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("infer", help="single-model inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits")
    p.add_argument("--out", required=True)
    p.add_argument("--native", action="store_true", help="also map masks back to native space")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ensemble-infer", help="probability-averaging ensemble inference")
    p.add_argument("--ensemble-spec", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits")
    p.add_argument("--out", required=True)
    p.add_argument("--native", action="store_true")
    p.set_defaults(func=cmd_ensemble_infer)

    p = sub.add_parser("evaluate", help="metrics CSV + box plots for one prediction dir")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model-id")
    p.add_argument("--strata", help="restrict to lesion-size strata, e.g. small,medium")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rank", help="case-level ranking across prediction dirs")
    p.add_argument("--pred-dirs", required=True, help="comma-separated prediction dirs")
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strata", help="restrict to lesion-size strata, e.g. small,medium")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("maps", help="voxel-wise FP/FN proportion and mean-distance maps")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fwhm", type=float, default=DEFAULT_FWHM_MM)
    p.add_argument("--strata", help="restrict to lesion-size strata, e.g. small,medium")
    p.set_defaults(func=cmd_maps)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # runtime failures -> exit 1 with diagnostic
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
