import json

import numpy as np
import pytest

import stubs
from strokeseg.cli import main
from strokeseg.volume import load_mask, load_volume

TINY_RUN_CONFIG = {
    "network": {
        "encoder_filters": [4, 4, 4, 4, 4],
        "bottleneck_filters": 4,
        "gn_groups": 2,
        "se_reduction": 2,
        "deep_supervision": False,
    },
    "train": {"epochs": 2, "batch_size": 2, "seed": 0},
    "loss": {"kind": "ufl"},
    "augmentation": {
        "flip_prob": 0.0,
        "max_translation": [0, 0, 0],
        "max_rotation_deg": 0.0,
        "noise_sigma_range": [0.0, 0.0],
        "gamma_range": [1.0, 1.0],
    },
    "mt": {"consistency_weight": 1.0, "rampup_epochs": 1},
}

PHANTOM_SPEC = {
    "grid": {"shape": [20, 24, 4], "spacing": [1.0, 1.0, 4.0]},
    "lesion_count": [1, 2],
    "lesion_radius_mm": [2.0, 4.0],
    "noise_level": 0.02,
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> preprocess -> train once for the whole module."""
    root = tmp_path_factory.mktemp("cli")
    spec_path = root / "phantom.json"
    spec_path.write_text(json.dumps(PHANTOM_SPEC))
    cfg_path = root / "run.json"
    cfg_path.write_text(json.dumps(TINY_RUN_CONFIG))

    raw = root / "raw"
    assert main(["synth", "--out", str(raw), "--sizes", "2,2,2", "--seed", "7", "--spec", str(spec_path)]) == 0

    tools = root / "tools"
    tools.mkdir()
    strip = stubs.skullstrip_threshold(tools, threshold=0.3)
    reg = stubs.register_identity(tools)

    reference = root / "reference.nii.gz"
    first_dwi = sorted(raw.glob("*_dwi.nii.gz"))[0]
    import shutil

    shutil.copy(first_dwi, reference)

    prep = root / "prep"
    assert (
        main(
            [
                "preprocess", "--in", str(raw), "--out", str(prep),
                "--reference", str(reference),
                "--skullstrip-tool", strip, "--register-tool", reg,
            ]
        )
        == 0
    )

    ckpt = root / "model.npz"
    assert main(["train", "--config", str(cfg_path), "--data", str(prep), "--out", str(ckpt)]) == 0
    return {
        "root": root, "raw": raw, "prep": prep, "ckpt": ckpt,
        "config": cfg_path, "tools": tools, "reference": reference,
    }


class TestSynth:
    def test_deterministic_manifest(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps(PHANTOM_SPEC))
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["synth", "--out", str(a), "--sizes", "2,3,1", "--seed", "1", "--spec", str(spec)]) == 0
        assert main(["synth", "--out", str(b), "--sizes", "2,3,1", "--seed", "1", "--spec", str(spec)]) == 0
        assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()

    def test_sizes_respected(self, tmp_path):
        out = tmp_path / "d"
        assert main(["synth", "--out", str(out), "--sizes", "2,3,1", "--seed", "0"]) == 0
        payload = json.loads((out / "manifest.json").read_text())
        by_split = {}
        for entry in payload["cases"]:
            by_split.setdefault(entry["split"], []).append(entry)
        assert len(by_split["source"]) == 2
        assert len(by_split["target_unlabeled"]) == 3
        assert len(by_split["test"]) == 1

    def test_missing_out_is_usage_error(self):
        with pytest.raises(SystemExit) as err:
            main(["synth", "--sizes", "1,1,1"])
        assert err.value.code == 2

    def test_bad_sizes_is_runtime_error(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path / "x"), "--sizes", "1,2"]) == 1
        assert "error:" in capsys.readouterr().err


class TestPreprocess(object):
    def test_outputs_and_manifest(self, pipeline):
        prep = pipeline["prep"]
        manifest = json.loads((prep / "manifest.json").read_text())
        assert len(manifest["cases"]) == 6
        entry = manifest["cases"][0]
        assert (prep / entry["dwi"]).exists()
        assert (prep / entry["transform"]).exists()
        vol = load_volume(prep / entry["dwi"])
        assert vol.data.min() >= -5.0 and vol.data.max() <= 5.0

    def test_adapter_failure_exit_code(self, pipeline, tmp_path, capsys):
        bad = stubs.failing_tool(tmp_path, message="stub exploded")
        code = main(
            [
                "preprocess", "--in", str(pipeline["raw"]), "--out", str(tmp_path / "p"),
                "--reference", str(pipeline["reference"]),
                "--skullstrip-tool", bad, "--register-tool", bad,
            ]
        )
        assert code == 1
        assert "stub exploded" in capsys.readouterr().err


class TestTrainInfer:
    def test_checkpoint_and_log_exist(self, pipeline):
        assert pipeline["ckpt"].exists()
        log = pipeline["ckpt"].with_suffix(".log.csv")
        lines = log.read_text().splitlines()
        assert lines[0] == "epoch,mean_loss,lr"
        assert len(lines) == 3  # two epochs

    def test_infer_writes_predictions(self, pipeline, tmp_path):
        out = tmp_path / "pred"
        assert (
            main(
                [
                    "infer", "--checkpoint", str(pipeline["ckpt"]),
                    "--data", str(pipeline["prep"]), "--splits", "test",
                    "--out", str(out), "--native",
                ]
            )
            == 0
        )
        masks = sorted(out.glob("*_mask.nii.gz"))
        probs = sorted(out.glob("*_prob.nii.gz"))
        natives = sorted(out.glob("*_mask_native.nii.gz"))
        assert len(masks) == 2 and len(probs) == 2 and len(natives) == 2
        mask = load_mask(masks[0])
        assert set(np.unique(mask.data)) <= {0, 1}

    def test_adapt_checkpoint_holds_both_models(self, pipeline, tmp_path):
        out = tmp_path / "mt.npz"
        code = main(
            [
                "adapt", "--config", str(pipeline["config"]),
                "--data", str(pipeline["prep"]),
                "--target-data", str(pipeline["prep"]),
                "--out", str(out),
            ]
        )
        assert code == 0
        from strokeseg.network import checkpoint_extra, load_checkpoint, load_student_checkpoint

        assert checkpoint_extra(out)["role"] == "teacher"
        teacher = load_checkpoint(out)  # plain load gives the inference model
        student = load_student_checkpoint(out)
        assert teacher.config.dropout_rate == 0.0
        assert student.config.dropout_rate > 0.0

    def test_ensemble_infer(self, pipeline, tmp_path):
        spec = tmp_path / "ens.json"
        spec.write_text(json.dumps({"checkpoints": [str(pipeline["ckpt"]), str(pipeline["ckpt"])]}))
        out = tmp_path / "pred"
        assert (
            main(
                [
                    "ensemble-infer", "--ensemble-spec", str(spec),
                    "--data", str(pipeline["prep"]), "--splits", "test", "--out", str(out),
                ]
            )
            == 0
        )
        assert len(sorted(out.glob("*_mask.nii.gz"))) == 2


class TestEvaluateRankMaps:
    def test_evaluate_pred_equals_gt(self, pipeline, tmp_path):
        gt_dir = pipeline["prep"]
        out = tmp_path / "eval"
        assert (
            main(
                [
                    "evaluate", "--pred-dir", str(gt_dir), "--gt-dir", str(gt_dir),
                    "--out", str(out), "--model-id", "oracle",
                ]
            )
            == 0
        )
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0].startswith("case_id,model_id,dsc")
        for line in lines[1:]:
            fields = line.split(",")
            assert float(fields[2]) == 1.0  # dsc
            assert float(fields[3]) == 0.0  # avd
        assert (out / "metrics.png").exists()

    def test_rank_dominant_model(self, pipeline, tmp_path):
        # model "good" = ground truth; model "bad" = empty masks
        gt_dir = pipeline["prep"]
        good = tmp_path / "good"
        bad = tmp_path / "bad"
        good.mkdir(), bad.mkdir()
        import shutil

        from strokeseg.volume import BinaryMask, save_volume

        for label_path in gt_dir.glob("*_label.nii.gz"):
            cid = label_path.name.replace("_label.nii.gz", "")
            shutil.copy(label_path, good / f"{cid}_mask.nii.gz")
            gt = load_mask(label_path)
            empty = BinaryMask(gt.grid, np.zeros(gt.grid.shape, dtype=np.uint8))
            save_volume(empty, bad / f"{cid}_mask.nii.gz")

        out = tmp_path / "rank"
        assert (
            main(
                [
                    "rank", "--pred-dirs", f"{good},{bad}", "--gt-dir", str(gt_dir),
                    "--out", str(out),
                ]
            )
            == 0
        )
        report = (out / "ranking_report.txt").read_text()
        lines = report.strip().splitlines()
        assert lines[2].split()[0] == "good"
        assert lines[2].split()[1] == "1.00"
        assert lines[3].split()[0] == "bad"
        assert lines[3].split()[1] == "2.00"
        assert (out / "mean_rank.png").exists()
        assert (out / "metrics.csv").exists()

    def test_evaluate_strata_filter(self, pipeline, tmp_path):
        gt_dir = pipeline["prep"]
        out = tmp_path / "eval_small"
        code = main(
            [
                "evaluate", "--pred-dir", str(gt_dir), "--gt-dir", str(gt_dir),
                "--out", str(out), "--strata", "small",
            ]
        )
        assert code == 0
        lines = (out / "metrics.csv").read_text().splitlines()
        assert all(line.endswith(",small") for line in lines[1:])

    def test_evaluate_bad_stratum_rejected(self, pipeline, tmp_path, capsys):
        gt_dir = pipeline["prep"]
        code = main(
            [
                "evaluate", "--pred-dir", str(gt_dir), "--gt-dir", str(gt_dir),
                "--out", str(tmp_path / "x"), "--strata", "tiny",
            ]
        )
        assert code == 1
        assert "unknown strata" in capsys.readouterr().err

    def test_maps_pred_equals_gt_all_zero(self, pipeline, tmp_path):
        gt_dir = pipeline["prep"]
        out = tmp_path / "maps"
        assert main(["maps", "--pred-dir", str(gt_dir), "--gt-dir", str(gt_dir), "--out", str(out)]) == 0
        for name in ("fp_proportion", "fn_proportion", "fp_mean_hd", "fn_mean_hd"):
            vol = load_volume(out / f"{name}.nii.gz")
            assert np.all(vol.data == 0.0)
            assert (out / f"{name}.png").exists()


class TestConfigValidation:
    def test_unknown_key_rejected(self, pipeline, tmp_path, capsys):
        cfg = dict(TINY_RUN_CONFIG)
        cfg["network"] = dict(cfg["network"], kernel="huge")
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(cfg))
        code = main(["train", "--config", str(path), "--data", str(pipeline["prep"]), "--out", str(tmp_path / "m.npz")])
        assert code == 1
        assert "unknown keys" in capsys.readouterr().err

    def test_unknown_section_rejected(self, pipeline, tmp_path, capsys):
        cfg = dict(TINY_RUN_CONFIG, optimizer={"name": "sgd"})
        path = tmp_path / "bad2.json"
        path.write_text(json.dumps(cfg))
        code = main(["train", "--config", str(path), "--data", str(pipeline["prep"]), "--out", str(tmp_path / "m.npz")])
        assert code == 1
        assert "unknown config sections" in capsys.readouterr().err
