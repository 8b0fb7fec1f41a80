import json

import numpy as np
import pytest

from mmfc.cli import EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_INTEGRITY, EXIT_OK, main
from mmfc.experiment import Experiment, ExperimentConfig
from mmfc.pipeline.topologies import run_topology

TINY = {
    "data": {"n_train": 16, "n_test": 4},
    "codec": {"epochs": 2, "lr": 1e-3},
    "frontend": {"epochs": 2},
    "timing_samples": 2,
    "pair_train": 8,
    "pair_test": 4,
}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    out = root / "run"
    assert run("gen-data", "--config", cfg, "--out", out) == EXIT_OK
    assert run("train", "--stage", "task-head", "--out", out) == EXIT_OK
    return out


class TestGenData:
    def test_idempotent(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run("gen-data", "--out", a, "--seed", 3) == EXIT_OK
        assert run("gen-data", "--out", b, "--seed", 3) == EXIT_OK
        assert (a / "dataset.jsonl").read_bytes() == (b / "dataset.jsonl").read_bytes()
        first = (a / "dataset.jsonl").read_bytes()
        assert run("gen-data", "--out", a, "--seed", 3) == EXIT_OK
        assert (a / "dataset.jsonl").read_bytes() == first

    def test_four_to_one_split(self, tmp_path):
        assert run("gen-data", "--out", tmp_path) == EXIT_OK
        rows = [json.loads(line) for line in (tmp_path / "dataset.jsonl").read_text().splitlines()]
        n_train = sum(r["split"] == "train" for r in rows)
        assert n_train == 4 * (len(rows) - n_train) == 2000
        assert len({r["seed"] for r in rows}) == len(rows)

    def test_empty_scenes_allowed(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"data": {"density": 0.0, "n_train": 8, "n_test": 2}}))
        assert run("gen-data", "--config", cfg, "--out", tmp_path / "run") == EXIT_OK

    def test_manifest_lists_artifacts(self, tmp_path):
        run("gen-data", "--out", tmp_path)
        m = json.loads((tmp_path / "manifest.json").read_text())
        assert set(m["artifacts"]) == {"config.json", "dataset.jsonl"}
        assert m["seeds"]["experiment"] == 0


class TestErrors:
    def test_malformed_config(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text('{"data": {"q": 64,}}')
        assert run("gen-data", "--config", cfg, "--out", tmp_path) == EXIT_CONFIG
        assert "line 1" in capsys.readouterr().err

    def test_invalid_value(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text('{"codec": {"lr": -1}}')
        assert run("gen-data", "--config", cfg, "--out", tmp_path) == EXIT_CONFIG

    def test_unknown_subcommand(self):
        assert run("frobnicate") == EXIT_CONFIG

    def test_train_without_dataset(self, tmp_path):
        assert run("train", "--stage", "task-head", "--out", tmp_path) == EXIT_DEPENDENCY

    def test_cond_without_predictor(self, workspace):
        assert run("train", "--stage", "cond", "--topology", "a3", "--lambda", 0.0625,
                   "--out", workspace) == EXIT_DEPENDENCY

    def test_lambda_off_grid(self, workspace):
        assert run("train", "--stage", "anf", "--lambda", 0.1, "--out", workspace) == EXIT_CONFIG


class TestTrainAndCode:
    def test_sweep_writes_four_checkpoints(self, workspace):
        assert run("train", "--stage", "anf", "--sweep", "--out", workspace) == EXIT_OK
        assert sorted(p.name for p in (workspace / "models").glob("anf_fused_l*.bin")) == \
            [f"anf_fused_l{i}.bin" for i in range(4)]

    def test_a2_encode_decode(self, workspace, tmp_path, capsys):
        lam = 0.0625
        assert run("train", "--stage", "anf", "--topology", "a2", "--lambda", lam, "--out", workspace) == EXIT_OK
        assert run("train", "--stage", "cond", "--topology", "a2", "--case", 2, "--lambda", lam,
                   "--out", workspace) == EXIT_OK
        stem = tmp_path / "s"
        assert run("codec", "encode", "--topology", "a2", "--case", 2, "--lambda", lam, "--sample", 1,
                   "--output", stem, "--out", workspace) == EXIT_OK
        files = sorted(p.name for p in tmp_path.glob("s.*.mmfc"))
        assert files == ["s.camera.mmfc", "s.lidar.mmfc"]
        assert run("codec", "decode", "--topology", "a2", "--input", stem, "--output", tmp_path / "y.npz",
                   "--out", workspace) == EXIT_OK
        cfg = ExperimentConfig.from_dict(json.loads((workspace / "config.json").read_text()))
        exp = Experiment(cfg, workspace)
        te = exp.data()["test"]
        ref = run_topology("a2", (te.camera[1], te.lidar[1]), exp.models_for("a2", 2, 3, train=False))
        with np.load(tmp_path / "y.npz") as got:
            np.testing.assert_array_equal(got["camera"], ref.decoded["camera"].values)
            np.testing.assert_array_equal(got["lidar"], ref.decoded["lidar"].values)
            np.testing.assert_array_equal(got["scores"], ref.prediction.scores)

        raw = bytearray((tmp_path / "s.lidar.mmfc").read_bytes())
        raw[1] ^= 0xFF
        (tmp_path / "s.lidar.mmfc").write_bytes(bytes(raw))
        capsys.readouterr()
        assert run("codec", "decode", "--topology", "a2", "--input", stem, "--output", tmp_path / "z.npz",
                   "--out", workspace) == EXIT_INTEGRITY
        assert "offset 0" in capsys.readouterr().err

    def test_truncated_payload(self, workspace, tmp_path, capsys):
        stem = tmp_path / "t"
        assert run("codec", "encode", "--sample", 0, "--output", stem, "--out", workspace) == EXIT_OK
        p = tmp_path / "t.fused.mmfc"
        p.write_bytes(p.read_bytes()[:-3])
        capsys.readouterr()
        assert run("codec", "decode", "--input", stem, "--output", tmp_path / "u", "--out", workspace) == EXIT_INTEGRITY
        assert "offset" in capsys.readouterr().err

    def test_decode_missing_stream(self, workspace, tmp_path):
        assert run("codec", "decode", "--input", tmp_path / "none", "--output", tmp_path / "o",
                   "--out", workspace) == EXIT_CONFIG


def test_eval_writes_report(workspace, capsys):
    assert run("eval", "--train", "--no-pairs", "--timing-samples", 2, "--out", workspace) == EXIT_OK
    out = capsys.readouterr().out
    assert "ceiling mAP" in out and "timing a1" in out
    report = workspace / "report"
    names = {p.name for p in report.iterdir()}
    assert {"summary.json", "curve_a1_0.csv", "curve_a2_1.csv", "curve_a2_2.csv", "curve_a3_1.csv"} <= names
    assert {p.name for p in (report / "figures").glob("*.png")} == {"rate_map.png", "feature_maps.png",
                                                                    "training_loss.png"}
    summary = json.loads((report / "summary.json").read_text())
    assert {t["use_case"] for t in summary["timing"]} == {"on-board", "edge-cloud"}
