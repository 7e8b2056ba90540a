import json
import os

import numpy as np
import pytest

from qrater.cli import main
from qrater.data import load_annotations, load_features, load_masks


WORLD_SPEC = {
    "n_samples": 40,
    "n_patches": 16,
    "feature_dim": 8,
    "n_annotators": 3,
    "n_classes": 3,
    "mask_size": 4,
    "noise_level": 0.0,
    "seed": 5,
}

RUN_CONFIG = {
    "model": {"hidden_dim": 16, "n_heads": 2, "n_blocks": 1,
              "classifier_hidden": 8},
    "train": {"peak_lr": 0.005, "max_epochs": 3, "patience": 2,
              "batch_size": 16},
    "out_dir": None,
    "seed": 3,
}


@pytest.fixture(scope="module")
def world_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("world")
    spec = out / "spec.json"
    spec.write_text(json.dumps(WORLD_SPEC))
    assert main(["synth", str(spec), str(out)]) == 0
    return out


def write_run_config(tmp_path, world_dir, name="config.json", **overrides):
    doc = json.loads(json.dumps(RUN_CONFIG))
    doc["data"] = {"features": str(world_dir / "features.qmfs"),
                   "annotations": str(world_dir / "annotations.csv"),
                   "train_frac": 0.7, "val_frac": 0.15}
    doc["out_dir"] = str(tmp_path / "run")
    doc.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path, doc


class TestSynth:
    def test_outputs_exist_and_reload(self, world_dir):
        feats = load_features(world_dir / "features.qmfs")
        ann = load_annotations(world_dir / "annotations.csv")
        assert len(feats.sample_ids) == 40
        assert ann.n_annotators == 3
        assert (world_dir / "config.echo.json").exists()

    def test_masks_match_generator(self, world_dir):
        from qrater.data import WorldSpec, gen_synthetic_world

        doc = dict(WORLD_SPEC)
        seed = doc.pop("seed")
        world = gen_synthetic_world(WorldSpec(**doc), seed)
        assert load_masks(world_dir / "masks.json") == world.masks

    def test_byte_identical_regeneration(self, world_dir, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps(WORLD_SPEC))
        assert main(["synth", str(spec), str(tmp_path / "w2")]) == 0
        for name in ("features.qmfs", "annotations.csv", "masks.json"):
            assert (tmp_path / "w2" / name).read_bytes() == \
                (world_dir / name).read_bytes()

    def test_unknown_key_rejected(self, tmp_path):
        spec = tmp_path / "bad.json"
        spec.write_text(json.dumps({**WORLD_SPEC, "bogus": 1}))
        assert main(["synth", str(spec), str(tmp_path / "w3")]) == 2


class TestTrain:
    def test_run_produces_artifacts(self, world_dir, tmp_path):
        cfg_path, doc = write_run_config(tmp_path, world_dir)
        assert main(["train", str(cfg_path)]) == 0
        out = doc["out_dir"]
        for name in ("checkpoint.bin", "checkpoint.json", "history.json",
                     "config.echo.json"):
            assert os.path.exists(os.path.join(out, name)), name
        hist = json.load(open(os.path.join(out, "history.json")))
        assert hist["stopped_epoch"] <= 3

    def test_rerun_byte_identical(self, world_dir, tmp_path):
        cfg1, doc1 = write_run_config(tmp_path, world_dir, name="c1.json",
                                      out_dir=str(tmp_path / "r1"))
        cfg2, doc2 = write_run_config(tmp_path, world_dir, name="c2.json",
                                      out_dir=str(tmp_path / "r2"))
        assert main(["train", str(cfg1)]) == 0
        assert main(["train", str(cfg2)]) == 0
        for name in ("history.json", "checkpoint.bin"):
            b1 = open(os.path.join(doc1["out_dir"], name), "rb").read()
            b2 = open(os.path.join(doc2["out_dir"], name), "rb").read()
            assert b1 == b2, name

    def test_missing_feature_file_exit_2(self, world_dir, tmp_path, capsys):
        cfg_path, _doc = write_run_config(tmp_path, world_dir)
        doc = json.loads(cfg_path.read_text())
        doc["data"]["features"] = str(tmp_path / "nope.qmfs")
        cfg_path.write_text(json.dumps(doc))
        assert main(["train", str(cfg_path)]) == 2
        assert "nope.qmfs" in capsys.readouterr().err

    def test_unknown_config_key_exit_2(self, world_dir, tmp_path):
        cfg_path, _doc = write_run_config(tmp_path, world_dir)
        doc = json.loads(cfg_path.read_text())
        doc["mystery"] = True
        cfg_path.write_text(json.dumps(doc))
        assert main(["train", str(cfg_path)]) == 2

    def test_set_override(self, world_dir, tmp_path):
        cfg_path, doc = write_run_config(tmp_path, world_dir)
        assert main(["train", str(cfg_path),
                     "--set", "train.max_epochs=2",
                     "--set", "train.patience=1"]) == 0
        hist = json.load(open(os.path.join(doc["out_dir"], "history.json")))
        assert hist["stopped_epoch"] <= 2
        echo = json.load(open(os.path.join(doc["out_dir"],
                                           "config.echo.json")))
        assert echo["train"]["max_epochs"] == 2


@pytest.fixture(scope="module")
def trained_run(world_dir, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    cfg_path, doc = write_run_config(tmp, world_dir)
    assert main(["train", str(cfg_path)]) == 0
    return doc["out_dir"]


class TestEval:
    def test_report_and_table(self, world_dir, trained_run, tmp_path):
        out = tmp_path / "eval"
        assert main(["eval",
                     "--checkpoint", os.path.join(trained_run, "checkpoint"),
                     "--features", str(world_dir / "features.qmfs"),
                     "--annotations", str(world_dir / "annotations.csv"),
                     "--out", str(out)]) == 0
        report = json.load(open(out / "report.json"))
        table = (out / "table.txt").read_text()
        header = table.splitlines()[0].split()
        assert header == ["Metric", "A_1", "A_2", "A_3", "Avg", "CoPr"]
        # text table agrees with the JSON value for value
        acc_cells = table.splitlines()[1].split()[1:]
        for aid, cell in zip(report["annotator_ids"], acc_cells):
            assert float(cell) == pytest.approx(
                report["per_annotator"][aid]["accuracy"], abs=5e-5)
        assert float(acc_cells[-2]) == pytest.approx(
            report["avg_accuracy"], abs=5e-5)
        assert float(acc_cells[-1]) == pytest.approx(
            report["copr_accuracy"], abs=5e-5)

    def test_checkpoint_annotation_mismatch(self, world_dir, trained_run,
                                            tmp_path, capsys):
        # two annotators in the file, three in the checkpoint
        bad = tmp_path / "bad.csv"
        bad.write_text("sample_id,annotator_id,label\ns0000,a0,x\ns0000,a1,y\n")
        rc = main(["eval",
                   "--checkpoint", os.path.join(trained_run, "checkpoint"),
                   "--features", str(world_dir / "features.qmfs"),
                   "--annotations", str(bad),
                   "--out", str(tmp_path / "eval2")])
        assert rc == 2
        assert "n_annotators" in capsys.readouterr().err


class TestSweep:
    def test_sweep_and_resume(self, world_dir, tmp_path, capsys):
        cfg_path, doc = write_run_config(tmp_path, world_dir,
                                         out_dir=str(tmp_path / "sweep"))
        args = ["sweep", str(cfg_path), "--rates", "0,0.4", "--seeds", "1",
                "--variants", "full"]
        assert main(args) == 0
        out = doc["out_dir"]
        sweep = json.load(open(os.path.join(out, "sweep.json")))
        assert len(sweep["cells"]) == 2
        cell_dir = os.path.join(out, "cells")
        cell_files = sorted(os.listdir(cell_dir))
        assert len(cell_files) == 2
        mtimes = {f: os.path.getmtime(os.path.join(cell_dir, f))
                  for f in cell_files}
        # resume: a second invocation must not recompute finished cells
        assert main(args) == 0
        for f in cell_files:
            assert os.path.getmtime(os.path.join(cell_dir, f)) == mtimes[f]

    def test_drop_summary_recomputable_from_cells(self, world_dir, tmp_path):
        cfg_path, doc = write_run_config(tmp_path, world_dir,
                                         out_dir=str(tmp_path / "sweep2"))
        assert main(["sweep", str(cfg_path), "--rates", "0,0.5",
                     "--seeds", "1,2", "--variants", "full"]) == 0
        sweep = json.load(open(os.path.join(doc["out_dir"], "sweep.json")))
        cells = sweep["cells"]
        full0 = np.mean([c["avg_accuracy"] for c in cells
                         if c["rate"] == 0.0])
        full5 = np.mean([c["avg_accuracy"] for c in cells
                         if c["rate"] == 0.5])
        expected = 100.0 * (full0 - full5) / full0
        assert sweep["summary"]["full"]["0.5"]["relative_drop_pct"] == \
            pytest.approx(expected)

    def test_rate_zero_matches_plain_training(self, world_dir, tmp_path):
        cfg_path, doc = write_run_config(tmp_path, world_dir,
                                         out_dir=str(tmp_path / "sweep3"))
        assert main(["sweep", str(cfg_path), "--rates", "0",
                     "--seeds", "3", "--variants", "full"]) == 0
        sweep = json.load(open(os.path.join(doc["out_dir"], "sweep.json")))
        cell = sweep["cells"][0]
        from qrater.data import load_annotations, load_features
        from qrater.evalsuite import run_training_cell, strip_cell
        from qrater.model import ModelConfig
        from qrater.trainer import TrainConfig
        import types

        bundle = types.SimpleNamespace(
            features=load_features(world_dir / "features.qmfs"),
            annotations=load_annotations(world_dir / "annotations.csv"))
        mcfg = ModelConfig(n_annotators=3, n_classes=3, feature_dim=8,
                           hidden_dim=16, n_heads=2, n_blocks=1,
                           classifier_hidden=8)
        tcfg = TrainConfig(peak_lr=0.005, max_epochs=3, patience=2,
                           batch_size=16)
        direct = strip_cell(run_training_cell(bundle, "full", 0.0, 3,
                                              mcfg, tcfg))
        assert direct["avg_accuracy"] == pytest.approx(cell["avg_accuracy"])
        assert direct["report"] == cell["report"]


class TestViz:
    def test_pgms_and_sidecars(self, world_dir, trained_run, tmp_path):
        out = tmp_path / "viz"
        assert main(["viz",
                     "--checkpoint", os.path.join(trained_run, "checkpoint"),
                     "--features", str(world_dir / "features.qmfs"),
                     "--masks", str(world_dir / "masks.json"),
                     "--out", str(out), "--max-samples", "8"]) == 0
        pgms = sorted(p.name for p in out.glob("focus_a*.pgm"))
        assert pgms == ["focus_a0.pgm", "focus_a1.pgm", "focus_a2.pgm"]
        for k in range(3):
            sidecar = json.load(open(out / f"focus_a{k}.pgm.json"))
            assert sum(sidecar["weights"]) == pytest.approx(1.0, abs=1e-6)
        summary = json.load(open(out / "viz_summary.json"))
        assert set(summary["recovery_scores"]) == {"0", "1", "2"}

    def test_summary_scores_match_recomputation(self, world_dir, trained_run,
                                                tmp_path):
        out = tmp_path / "viz2"
        assert main(["viz",
                     "--checkpoint", os.path.join(trained_run, "checkpoint"),
                     "--features", str(world_dir / "features.qmfs"),
                     "--masks", str(world_dir / "masks.json"),
                     "--out", str(out), "--max-samples", "6"]) == 0
        from qrater.focus import FocusMap, focus_recovery_score, load_sidecar

        summary = json.load(open(out / "viz_summary.json"))
        masks = load_masks(world_dir / "masks.json")
        for k in range(3):
            fmap = load_sidecar(out / f"focus_a{k}.pgm")
            aid = sorted(masks)[k]
            assert summary["recovery_scores"][str(k)] == pytest.approx(
                focus_recovery_score(fmap, masks[aid]))

    def test_annotator_subset(self, world_dir, trained_run, tmp_path):
        out = tmp_path / "viz3"
        assert main(["viz",
                     "--checkpoint", os.path.join(trained_run, "checkpoint"),
                     "--features", str(world_dir / "features.qmfs"),
                     "--out", str(out), "--annotators", "1",
                     "--max-samples", "4"]) == 0
        assert [p.name for p in out.glob("*.pgm")] == ["focus_a1.pgm"]


class TestExitCodes:
    def test_missing_config_file(self):
        assert main(["train", "/nonexistent/config.json"]) == 2

    def test_bad_json(self, tmp_path):
        p = tmp_path / "broken.json"
        p.write_text("{not json")
        assert main(["train", str(p)]) == 2
