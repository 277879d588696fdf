import csv
import json
import os

import numpy as np
import pytest

from lungcad import cli
from lungcad.candidates import Candidate, save_candidates_csv
from lungcad.volume import (
    CtVolume,
    NoduleAnnotation,
    save_annotations_csv,
    save_metaimage,
)

SMALL_CONFIG = {
    "seed": 7,
    "phantom": {
        "shape": [48, 48, 48],
        "nodule_count_range": [1, 2],
        "diameter_range": [5.0, 14.0],
        "malignant_diameter_mm": 8.0,
        "vessel_count_range": [0, 1],
    },
    "mil": {"epochs": 5, "attention_dim": 4, "batch_size": 8},
    "eval": {"bootstrap_B": 25},
}


def write_config(tmp_path, extra=None):
    cfg = json.loads(json.dumps(SMALL_CONFIG))
    if extra:
        cfg.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def dataset_dir(tmp_path, n=4, name="data"):
    out = tmp_path / name
    code = cli.main([
        "phantom-gen", "--config", write_config(tmp_path), "--n", str(n),
        "--out", str(out),
    ])
    assert code == 0
    return out


def read_tree(root):
    return {
        f: (root / f).read_bytes()
        for f in sorted(p.name for p in root.iterdir())
    }


class TestPhantomGen:
    def test_generates_dataset(self, tmp_path):
        out = dataset_dir(tmp_path, n=3)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["n_patients"] == 3
        assert (out / manifest["patients"][0]["volume"]).exists()

    def test_seed_determinism(self, tmp_path):
        a = dataset_dir(tmp_path, n=2, name="a")
        b = dataset_dir(tmp_path, n=2, name="b")
        assert read_tree(a) == read_tree(b)

    def test_missing_seed(self, tmp_path):
        cfg = tmp_path / "noseed.json"
        cfg.write_text("{}")
        code = cli.main(["phantom-gen", "--config", str(cfg), "--n", "1",
                         "--out", str(tmp_path / "x")])
        assert code == cli.EXIT_CONFIG

    def test_bad_config_json(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text("{not json")
        code = cli.main(["phantom-gen", "--config", str(cfg), "--n", "1",
                         "--seed", "1", "--out", str(tmp_path / "x")])
        assert code == cli.EXIT_FORMAT


class TestScoreExtract:
    def test_score_then_extract(self, tmp_path):
        out = dataset_dir(tmp_path, n=1)
        manifest = json.loads((out / "manifest.json").read_text())
        vol_path = str(out / manifest["patients"][0]["volume"])
        prob_path = str(tmp_path / "prob.mhd")
        assert cli.main(["score", "--volume", vol_path, "--out", prob_path]) == 0
        assert os.path.exists(prob_path)
        assert os.path.exists(str(tmp_path / "prob.raw"))
        cand_path = str(tmp_path / "cands.csv")
        assert cli.main([
            "extract", "--probmap", prob_path, "--threshold", "0.5",
            "--patient-id", manifest["patients"][0]["id"], "--out", cand_path,
        ]) == 0
        rows = list(csv.reader(open(cand_path)))
        assert rows[0][0] == "patient_id"

    def test_score_determinism(self, tmp_path):
        out = dataset_dir(tmp_path, n=1)
        manifest = json.loads((out / "manifest.json").read_text())
        vol_path = str(out / manifest["patients"][0]["volume"])
        p1, p2 = str(tmp_path / "a.mhd"), str(tmp_path / "b.mhd")
        cli.main(["score", "--volume", vol_path, "--out", p1])
        cli.main(["score", "--volume", vol_path, "--out", p2])
        raw1 = open(str(tmp_path / "a.raw"), "rb").read()
        raw2 = open(str(tmp_path / "b.raw"), "rb").read()
        assert raw1 == raw2

    def test_missing_volume(self, tmp_path):
        code = cli.main(["score", "--volume", str(tmp_path / "missing.mhd"),
                         "--out", str(tmp_path / "p.mhd")])
        assert code == cli.EXIT_MISSING_FILE

    def test_bad_threshold(self, tmp_path):
        out = dataset_dir(tmp_path, n=1)
        manifest = json.loads((out / "manifest.json").read_text())
        vol_path = str(out / manifest["patients"][0]["volume"])
        prob_path = str(tmp_path / "p.mhd")
        cli.main(["score", "--volume", vol_path, "--out", prob_path])
        code = cli.main(["extract", "--probmap", prob_path, "--threshold",
                         "1.5", "--out", str(tmp_path / "c.csv")])
        assert code == cli.EXIT_CONFIG


def perfect_fixture(tmp_path):
    """Two 32-cube patients, one nodule each, one exact candidate per
    nodule at score 1.0 and no extras."""
    data_dir = tmp_path / "perfect"
    cands_dir = tmp_path / "perfect_cands"
    data_dir.mkdir()
    cands_dir.mkdir()
    rng = np.random.default_rng(0)
    records = []
    for i in range(2):
        pid = f"pt{i}"
        vol = CtVolume(data=rng.normal(-850, 40, size=(32, 32, 32)),
                       spacing=(1.0, 1.0, 1.0))
        save_metaimage(vol, str(data_dir / f"{pid}.mhd"))
        center = (16.0, 16.0, 16.0)
        ann = NoduleAnnotation(patient_id=pid, center_world=center,
                               diameter=8.0, radiologist_scores=(3, 3, 3))
        save_annotations_csv([ann], str(data_dir / f"{pid}_annotations.csv"))
        cand = Candidate(patient_id=pid, center_voxel=center,
                         center_world=center, voxel_count=200,
                         volume_mm3=200.0, equivalent_diameter_mm=7.3,
                         mean_score=1.0, max_score=1.0)
        save_candidates_csv([cand], str(cands_dir / f"{pid}_candidates.csv"))
        records.append({"id": pid, "volume": f"{pid}.mhd",
                        "annotations": f"{pid}_annotations.csv",
                        "label": "benign"})
    manifest = {"n_patients": 2, "seed": 0, "malignant_prevalence": 0.0,
                "patients": records}
    (data_dir / "manifest.json").write_text(json.dumps(manifest))
    return data_dir, cands_dir


class TestEvalFroc:
    def test_perfect_detector_cpm_one(self, tmp_path):
        data_dir, cands_dir = perfect_fixture(tmp_path)
        out = str(tmp_path / "froc.csv")
        code = cli.main([
            "eval-froc", "--manifest", str(data_dir / "manifest.json"),
            "--candidates-dir", str(cands_dir), "--out", out, "--seed", "3",
        ])
        assert code == 0
        summary = json.loads(
            (tmp_path / "froc_summary.json").read_text()
        )
        assert summary["cpm"] == 1.0
        assert summary["cpm_ci"] == [1.0, 1.0]
        rows = list(csv.reader(open(out)))
        assert rows[0] == ["threshold", "fp_per_scan", "sensitivity"]

    def test_determinism(self, tmp_path):
        data_dir, cands_dir = perfect_fixture(tmp_path)
        outs = []
        for name in ("f1.csv", "f2.csv"):
            out = str(tmp_path / name)
            cli.main(["eval-froc", "--manifest",
                      str(data_dir / "manifest.json"),
                      "--candidates-dir", str(cands_dir), "--out", out,
                      "--seed", "3"])
            outs.append(open(out, "rb").read())
        assert outs[0] == outs[1]

    def test_missing_candidates(self, tmp_path):
        data_dir, _ = perfect_fixture(tmp_path)
        code = cli.main([
            "eval-froc", "--manifest", str(data_dir / "manifest.json"),
            "--candidates-dir", str(tmp_path / "nowhere"),
            "--out", str(tmp_path / "f.csv"), "--seed", "3",
        ])
        assert code == cli.EXIT_MISSING_FILE


class TestTrainEval:
    def test_train_eval_roundtrip(self, tmp_path):
        out = dataset_dir(tmp_path, n=8)
        cfg = write_config(tmp_path)
        model = str(tmp_path / "model.bin")
        code = cli.main(["train-mil", "--config", cfg, "--manifest",
                         str(out / "manifest.json"), "--out", model,
                         "--seed", "5"])
        assert code == 0
        assert os.path.exists(model)
        roc = str(tmp_path / "roc.csv")
        code = cli.main(["eval-roc", "--config", cfg, "--manifest",
                         str(out / "manifest.json"), "--model", model,
                         "--out", roc, "--seed", "6"])
        assert code == 0
        summary = json.loads((tmp_path / "roc_summary.json").read_text())
        assert 0.0 <= summary["auc"] <= 1.0
        assert 0.0 <= summary["ece"] <= 1.0
        rows = list(csv.reader(open(roc)))
        assert rows[0] == ["fpr", "tpr"]

    def test_train_determinism(self, tmp_path):
        out = dataset_dir(tmp_path, n=6)
        cfg = write_config(tmp_path)
        blobs = []
        for name in ("m1.bin", "m2.bin"):
            model = str(tmp_path / name)
            code = cli.main(["train-mil", "--config", cfg, "--manifest",
                             str(out / "manifest.json"), "--out", model,
                             "--seed", "9"])
            assert code == 0
            blobs.append(open(model, "rb").read())
        assert blobs[0] == blobs[1]


class TestCoupling:
    def test_matrix_complete(self, tmp_path):
        out = dataset_dir(tmp_path, n=8)
        cfg = write_config(tmp_path)
        table = str(tmp_path / "table.csv")
        code = cli.main(["experiment-coupling", "--config", cfg,
                         "--manifest", str(out / "manifest.json"),
                         "--out", table, "--seed", "11"])
        assert code == 0
        rows = list(csv.reader(open(table)))
        assert len(rows) == 4
        assert rows[0][0] == "train_fp\\test_fp"
        for row in rows[1:]:
            assert len(row) == 4
            for cell in row[1:]:
                assert 0.0 <= float(cell) <= 1.0

    def test_single_cell_matches_eval_roc(self, tmp_path):
        out = dataset_dir(tmp_path, n=8)
        cfg = write_config(tmp_path, extra={
            "coupling": {"fp_rates": [1000.0], "holdout": False},
        })
        model = str(tmp_path / "model.bin")
        assert cli.main(["train-mil", "--config", cfg, "--manifest",
                         str(out / "manifest.json"), "--out", model,
                         "--seed", "13"]) == 0
        roc = str(tmp_path / "roc.csv")
        assert cli.main(["eval-roc", "--config", cfg, "--manifest",
                         str(out / "manifest.json"), "--model", model,
                         "--out", roc, "--seed", "13"]) == 0
        summary = json.loads((tmp_path / "roc_summary.json").read_text())
        table = str(tmp_path / "table.csv")
        assert cli.main(["experiment-coupling", "--config", cfg,
                         "--manifest", str(out / "manifest.json"),
                         "--out", table, "--seed", "13"]) == 0
        rows = list(csv.reader(open(table)))
        assert float(rows[1][1]) == pytest.approx(summary["auc"], abs=1e-12)


class TestSmokePipeline:
    def test_end_to_end_csvs_reparse(self, tmp_path):
        from lungcad.candidates import load_candidates_csv

        out = dataset_dir(tmp_path, n=2, name="smoke")
        manifest = json.loads((out / "manifest.json").read_text())
        cands_dir = tmp_path / "cands"
        cands_dir.mkdir()
        for rec in manifest["patients"]:
            prob = str(tmp_path / f"{rec['id']}_prob.mhd")
            assert cli.main(["score", "--volume", str(out / rec["volume"]),
                             "--out", prob]) == 0
            cand_csv = str(cands_dir / f"{rec['id']}_candidates.csv")
            assert cli.main(["extract", "--probmap", prob, "--threshold",
                             "0.5", "--patient-id", rec["id"], "--out",
                             cand_csv]) == 0
            load_candidates_csv(cand_csv)  # closure property
        froc = str(tmp_path / "froc.csv")
        assert cli.main(["eval-froc", "--manifest", str(out / "manifest.json"),
                         "--candidates-dir", str(cands_dir), "--out", froc,
                         "--seed", "2"]) == 0
        rows = list(csv.reader(open(froc)))
        assert rows[0] == ["threshold", "fp_per_scan", "sensitivity"]
