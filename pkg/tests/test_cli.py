import json

import numpy as np
import pytest

from cdlab.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from cdlab.cli import format_heatmap, main, matrix_from_csv, matrix_to_csv
from cdlab.config import PRESETS, ConfigError, ExperimentConfig, parse_config
from cdlab.container import ContainerChecksumError
from cdlab.harness import PerformanceMatrix, average_forgetting, average_performance
from cdlab.model import ModelConfig
from cdlab.simulate import SYSTEMS
from cdlab.subnet import MaskPool, MaskTriple, Strategy, init_backbone, init_scores

TINY_RUN = {
    "schema_version": 1,
    "sequence": ["S1", "C4"],
    "methods": ["MSGODE", "Joint"],
    "n_train": 4,
    "n_test": 3,
    "model": {"d_hidden": 4, "d_latent": 2, "d_interaction": 3},
    "train": {"epochs": 1, "batch_size": 2},
}


def write_config(tmp_path, cfg=TINY_RUN, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


class TestConfig:
    def test_presets_match_listings(self):
        assert PRESETS["Seq1"] == [f"S{i}" for i in range(1, 9)]
        assert PRESETS["Seq2"] == ["S1", "S8", "S2", "S7", "S3", "S6", "S5", "S5"]
        assert PRESETS["Seq2Corrected"][6] == "S4"
        assert PRESETS["Seq3"] == ["S1", "C1", "S9", "C2", "S10", "C3", "S8", "C4"]
        assert PRESETS["Smoke"] == ["S1", "C4", "S8"]

    def test_round_trip(self):
        cfg = parse_config({**TINY_RUN, "train": {"strategy": {"kind": "topk", "ratio": 0.3}}})
        assert parse_config(json.loads(cfg.dumps())) == cfg
        inline = parse_config({"schema_version": 1, "sequence": [{**SYSTEMS["S3"].to_dict(), "name": "mine"}]})
        assert parse_config(json.loads(inline.dumps())) == inline

    def test_every_invalid_field_named(self):
        bad = {
            "schema_version": 1,
            "sequence": "Seq9",
            "repeats": 0,
            "n_train": -1,
            "train": {"lr": -1.0, "epochs": 0},
            "windows": {"drop_rate": 1.5},
            "colour": "red",
        }
        with pytest.raises(ConfigError) as err:
            parse_config(bad)
        msg = str(err.value)
        for field in ("sequence", "Seq1", "repeats", "n_train", "train.lr", "train.epochs", "windows.drop_rate", "colour"):
            assert field in msg

    def test_schema_version_required(self):
        with pytest.raises(ConfigError, match="schema_version"):
            parse_config({"sequence": "Seq1"})

    def test_defaults(self):
        cfg = ExperimentConfig()
        assert [s.name for s in cfg.systems()] == ["S1", "C4", "S8"]
        assert cfg.n_train == cfg.n_test == 100


class TestCheckpoint:
    def make(self):
        cfg = ModelConfig(d_hidden=4, d_latent=2, d_interaction=3)
        backbone, scores = init_backbone(cfg, 12)
        pool = MaskPool()
        pool.append(0, MaskTriple.from_scores(scores, Strategy()))
        pool.append(1, MaskTriple.from_scores(init_scores(cfg, 3), Strategy()))
        return Checkpoint(backbone, scores, pool, {"method": "MSGODE"})

    def test_round_trip(self, tmp_path):
        ckpt = self.make()
        save_checkpoint(tmp_path / "c.cdl", ckpt)
        back = load_checkpoint(tmp_path / "c.cdl")
        assert back == ckpt
        assert back.backbone.checksum() == ckpt.backbone.checksum()

    def test_corruption(self, tmp_path):
        save_checkpoint(tmp_path / "c.cdl", self.make())
        raw = bytearray((tmp_path / "c.cdl").read_bytes())
        raw[-10] ^= 0x10
        (tmp_path / "c.cdl").write_bytes(bytes(raw))
        with pytest.raises(ContainerChecksumError):
            load_checkpoint(tmp_path / "c.cdl")


class TestRendering:
    def matrix(self):
        M = PerformanceMatrix.empty(["S1", "C4", "S8"])
        rng = np.random.default_rng(0)
        for i in range(3):
            for j in range(i + 1):
                M.set(i, j, float(rng.random()))
        return M

    def test_csv_round_trip_exact(self):
        M = self.matrix()
        back = matrix_from_csv(matrix_to_csv(M))
        assert np.array_equal(back.values, M.values, equal_nan=True)
        assert back.names == M.names

    def test_heatmap_grid(self):
        lines = format_heatmap(self.matrix()).splitlines()
        assert len(lines) == 4 and len({len(l) for l in lines}) == 1
        assert lines[1].split()[2] == "-"


class TestCommands:
    def test_generate_seq1_manifest(self, tmp_path):
        cfg = write_config(tmp_path, {"schema_version": 1, "sequence": "Seq1", "n_train": 1, "n_test": 1})
        assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "d"), "--fix-seed"]) == 0
        manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert [e["name"] for e in manifest["systems"]] == [f"S{i}" for i in range(1, 9)]
        assert len(list((tmp_path / "d").glob("*.cdl"))) == 8
        s7 = manifest["systems"][6]["config"]
        assert (s7["box_size"], s7["interaction_strength"]) == (0.5, 0.5)

    def test_generate_deterministic_and_refuses_overwrite(self, tmp_path):
        cfg = write_config(tmp_path)
        args = ["generate", "--config", str(cfg), "--out", str(tmp_path / "d"), "--fix-seed"]
        assert main(args) == 0
        first = {p.name: p.read_bytes() for p in (tmp_path / "d").iterdir()}
        assert main(args) == 1
        assert main(args + ["--overwrite"]) == 0
        assert first == {p.name: p.read_bytes() for p in (tmp_path / "d").iterdir()}

    def test_entropy_seed_recorded(self, tmp_path):
        cfg = write_config(tmp_path)
        main(["generate", "--config", str(cfg), "--out", str(tmp_path / "a")])
        main(["generate", "--config", str(cfg), "--out", str(tmp_path / "b")])
        seeds = [json.loads((tmp_path / d / "manifest.json").read_text())["seed"] for d in "ab"]
        assert seeds[0] != seeds[1]

    def test_unknown_preset(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"schema_version": 1, "sequence": "Seq7"})
        assert main(["generate", "--config", str(cfg), "--out", str(tmp_path)]) == 1
        err = capsys.readouterr().err
        assert all(p in err for p in PRESETS)

    def test_run_missing_datasets(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["run", "--config", str(cfg), "--data", str(tmp_path / "none"), "--out", str(tmp_path / "r")]) == 1
        assert "S1.cdl" in capsys.readouterr().err

    def test_corrupt_dataset_is_runtime_failure(self, tmp_path):
        cfg = write_config(tmp_path)
        main(["generate", "--config", str(cfg), "--out", str(tmp_path / "d"), "--fix-seed"])
        path = tmp_path / "d" / "C4.cdl"
        raw = bytearray(path.read_bytes())
        raw[200] ^= 1
        path.write_bytes(bytes(raw))
        assert main(["run", "--config", str(cfg), "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r")]) == 2

    def test_run_report_end_to_end(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        data, out = tmp_path / "d", tmp_path / "r"
        assert main(["generate", "--config", str(cfg), "--out", str(data), "--fix-seed"]) == 0
        run = ["run", "--config", str(cfg), "--data", str(data), "--out", str(out), "--fix-seed", "--repeats", "2"]
        assert main(run) == 0
        summary = json.loads((out / "summary.json").read_text())
        ap = summary["methods"]["MSGODE"]["AP"]
        assert len(ap["values"]) == 2
        assert ap["std"] == pytest.approx(np.std(ap["values"], ddof=1))
        assert summary["methods"]["Joint"]["AF"]["mean"] is None

        joint = matrix_from_csv((out / "Joint" / "matrix_0.csv").read_text())
        assert joint.populated_rows() == [1]
        for name in ("matrix_1.csv", "heatmap_0.txt", "checkpoint_0.cdl", "trainlog_S1.csv", "trainlog_C4.csv"):
            assert (out / "MSGODE" / name).exists()
        assert load_checkpoint(out / "MSGODE" / "checkpoint_0.cdl").pool.masks_for(1) is not None

        csvs = {p.relative_to(out): p.read_bytes() for p in out.rglob("*.csv")}
        assert main(run + ["--overwrite"]) == 0
        assert csvs == {p.relative_to(out): p.read_bytes() for p in out.rglob("*.csv")}

        capsys.readouterr()
        assert main(["report", str(out)]) == 0
        text = capsys.readouterr().out
        M0 = matrix_from_csv((out / "MSGODE" / "matrix_0.csv").read_text())
        M1 = matrix_from_csv((out / "MSGODE" / "matrix_1.csv").read_text())
        mean_ap = (average_performance(M0) + average_performance(M1)) / 2
        assert f"{mean_ap:.4f}" in text
        assert mean_ap == pytest.approx(ap["mean"], rel=1e-12)
        assert average_forgetting(M0) is not None

    def test_single_repeat_std_zero(self, tmp_path):
        cfg = write_config(tmp_path, {**TINY_RUN, "methods": ["FineTune"]})
        main(["generate", "--config", str(cfg), "--out", str(tmp_path / "d"), "--fix-seed"])
        assert main(["run", "--config", str(cfg), "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r"), "--fix-seed"]) == 0
        summary = json.loads((tmp_path / "r" / "summary.json").read_text())
        assert summary["methods"]["FineTune"]["AP"]["std"] == 0.0

    def test_report_empty_dir(self, tmp_path):
        assert main(["report", str(tmp_path)]) == 1

    def test_study(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        main(["generate", "--config", str(cfg), "--out", str(tmp_path / "d"), "--fix-seed"])
        assert main(["study", "--config", str(cfg), "--data", str(tmp_path / "d"), "--out", str(tmp_path / "s"), "--fix-seed"]) == 0
        out = capsys.readouterr().out
        assert "fast" in out and "topk-0.5" in out and "selection" in out

    def test_bad_arguments_exit_one(self):
        assert main(["run", "--repeats", "0"]) == 1
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1
