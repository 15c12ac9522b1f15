import json
import math

import numpy as np
import pytest

from ravit.cli import main


def write_config(tmp_path, name="run.json", **overrides):
    doc = {
        "model": {"sides": [8, 16], "layers": [1, 1], "embed_dim": 8, "hidden_dim": 32,
                  "heads": 2, "num_classes": 4},
        "train": {"epochs": 2, "batch_size": 8, "lr": 0.002, "weight_decay": 0.01, "seed": 3},
        "exit": {"sweep": [0.0, 0.5, 1.0, 1.4]},
        "data": {"source": "synth", "samples": 24, "easy_frac": 0.5},
    }
    for key, value in overrides.items():
        doc.setdefault(key, {}).update(value)
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def cifar_reference_config(tmp_path, layers, sides):
    doc = {
        "model": {"sides": sides, "layers": layers, "patch": 4, "embed_dim": 128,
                  "hidden_dim": 512, "heads": 4, "num_classes": 10},
        "data": {"source": "synth"},
    }
    path = tmp_path / "cost.json"
    path.write_text(json.dumps(doc))
    return path


class TestCost:
    def test_reference_values_on_stdout(self, tmp_path, capsys):
        cfg = cifar_reference_config(tmp_path, layers=[0, 4], sides=[16, 32])
        assert main(["cost", "--config", str(cfg)]) == 0
        out = capsys.readouterr().out
        total_line = [l for l in out.splitlines() if l.strip().startswith("total")][0]
        value = float(total_line.split()[-2])
        # published table truncates to 110.88; half-up rounding may land one
        # hundredth above
        assert abs(round(value * 100) - 11088) <= 1

    def test_three_branch_gflops(self, tmp_path, capsys):
        doc = {
            "model": {"sides": [64, 128, 224], "layers": [1, 1, 10], "patch": 16,
                      "embed_dim": 768, "hidden_dim": 3072, "heads": 12, "num_classes": 1000},
            "data": {"source": "synth"},
        }
        path = tmp_path / "big.json"
        path.write_text(json.dumps(doc))
        assert main(["cost", "--config", str(path)]) == 0
        out = capsys.readouterr().out
        assert "30.25 GFLOPs" in out

    def test_zero_layer_config(self, tmp_path, capsys):
        cfg = cifar_reference_config(tmp_path, layers=[0, 0], sides=[16, 32])
        assert main(["cost", "--config", str(cfg)]) == 0
        assert "0.00 MFLOPs" in capsys.readouterr().out

    def test_csv_output(self, tmp_path, capsys):
        cfg = cifar_reference_config(tmp_path, layers=[1, 3], sides=[16, 32])
        out_csv = tmp_path / "cost.csv"
        assert main(["cost", "--config", str(cfg), "--out", str(out_csv)]) == 0
        lines = out_csv.read_text().splitlines()
        assert lines[0] == "branch,side,tokens,layers,macs_per_layer,macs,flops"
        assert lines[-1].startswith("total")
        assert lines[-1].endswith("89999360")

    def test_bad_config_exits_2(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert main(["cost", "--config", str(path)]) == 2

    def test_missing_config_exits_2(self, tmp_path, capsys):
        assert main(["cost", "--config", str(tmp_path / "none.json")]) == 2


class TestSweep:
    def test_reference_grid(self, tmp_path, capsys):
        cfg = cifar_reference_config(tmp_path, layers=[1, 3], sides=[16, 32])
        assert main(["sweep", "--config", str(cfg), "--ranges", "0:3,0:7"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "l1,l2,mflops"
        assert len(lines) == 33

    def test_cross_command_consistency(self, tmp_path, capsys):
        cfg = cifar_reference_config(tmp_path, layers=[1, 3], sides=[16, 32])
        main(["sweep", "--config", str(cfg), "--ranges", "0:3,0:7"])
        sweep_out = capsys.readouterr().out
        row = [l for l in sweep_out.splitlines() if l.startswith("1,3,")][0]
        main(["cost", "--config", str(cfg)])
        cost_out = capsys.readouterr().out
        total_line = [l for l in cost_out.splitlines() if l.strip().startswith("total")][0]
        assert row.split(",")[2] == total_line.split()[-2]

    def test_empty_range_exits_2(self, tmp_path, capsys):
        cfg = cifar_reference_config(tmp_path, layers=[1, 3], sides=[16, 32])
        assert main(["sweep", "--config", str(cfg), "--ranges", "3:1,0:7"]) == 2

    def test_range_count_must_match_branches(self, tmp_path, capsys):
        cfg = cifar_reference_config(tmp_path, layers=[1, 3], sides=[16, 32])
        assert main(["sweep", "--config", str(cfg), "--ranges", "0:3"]) == 2

    def test_trained_sweep_adds_accuracy_column(self, tmp_path, capsys):
        cfg = write_config(tmp_path, train={"epochs": 1, "batch_size": 8, "seed": 5},
                           data={"source": "synth", "samples": 16})
        out_csv = tmp_path / "grid.csv"
        assert main(["sweep", "--config", str(cfg), "--ranges", "1:1,1:1", "--train",
                     "--out", str(out_csv)]) == 0
        lines = out_csv.read_text().splitlines()
        assert lines[0] == "l1,l2,mflops,accuracy"
        assert len(lines) == 2
        acc = float(lines[1].split(",")[3])
        assert 0.0 <= acc <= 1.0


class TestTrainEvalExitdist:
    @pytest.fixture()
    def trained(self, tmp_path):
        cfg = write_config(tmp_path)
        ckpt = tmp_path / "model.bin"
        log = tmp_path / "log.csv"
        code = main(["train", "--config", str(cfg), "--checkpoint", str(ckpt), "--out", str(log)])
        assert code == 0
        return cfg, ckpt, log

    def test_train_writes_checkpoint_and_log(self, trained, capsys):
        _, ckpt, log = trained
        assert ckpt.exists()
        lines = log.read_text().splitlines()
        assert lines[0] == "epoch,lr,loss,exit1_acc,exit2_acc"
        assert len(lines) == 3

    def test_eval_deterministic(self, trained, capsys):
        cfg, ckpt, _ = trained
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt)]) == 0
        first = capsys.readouterr().out
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt)]) == 0
        assert capsys.readouterr().out == first
        assert "accuracy:" in first and "expected_flops:" in first

    def test_exitdist_matches_eval_at_zero_threshold(self, trained, tmp_path, capsys):
        cfg, ckpt, _ = trained
        out_csv = tmp_path / "dist.csv"
        assert main(["exitdist", "--config", str(cfg), "--checkpoint", str(ckpt),
                     "--out", str(out_csv)]) == 0
        rows = out_csv.read_text().splitlines()
        assert rows[0] == "threshold,s1,s2,accuracy,expected_flops"
        zero_row = rows[1].split(",")
        assert float(zero_row[0]) == 0.0
        dist_acc = float(zero_row[3])

        assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt),
                     "--threshold", "0.0"]) == 0
        eval_out = capsys.readouterr().out
        eval_acc = float([l for l in eval_out.splitlines() if l.startswith("accuracy:")][0].split()[1])
        assert dist_acc == eval_acc

    def test_exitdist_byte_identical_reruns(self, trained, tmp_path):
        cfg, ckpt, _ = trained
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        main(["exitdist", "--config", str(cfg), "--checkpoint", str(ckpt), "--out", str(a)])
        main(["exitdist", "--config", str(cfg), "--checkpoint", str(ckpt), "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_checkpoint_config_mismatch_exits_2(self, trained, tmp_path, capsys):
        _, ckpt, _ = trained
        other = write_config(tmp_path, name="other.json", model={"layers": [1, 2], "sides": [8, 16],
                             "embed_dim": 8, "hidden_dim": 32, "heads": 2, "num_classes": 4})
        assert main(["eval", "--config", str(other), "--checkpoint", str(ckpt)]) == 2
        err = capsys.readouterr().err
        assert "layers" in err

    def test_missing_checkpoint_exits_3(self, trained, tmp_path, capsys):
        cfg, _, _ = trained
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(tmp_path / "no.bin")]) == 3

    def test_seed_override_changes_training(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        main(["train", "--config", str(cfg), "--checkpoint", str(a), "--seed", "101"])
        main(["train", "--config", str(cfg), "--checkpoint", str(b), "--seed", "102"])
        assert a.read_bytes() != b.read_bytes()

    def test_divergent_config_exits_4(self, tmp_path, capsys):
        cfg = write_config(tmp_path, train={"epochs": 1, "batch_size": 8, "seed": 3,
                                            "lr": 1e200, "weight_decay": 1e200})
        ckpt = tmp_path / "model.bin"
        assert main(["train", "--config", str(cfg), "--checkpoint", str(ckpt)]) == 4


class TestSynth:
    def test_export_and_reload(self, tmp_path, capsys):
        doc = {
            "model": {"sides": [16, 32], "layers": [1, 1], "embed_dim": 8, "hidden_dim": 32,
                      "heads": 2, "num_classes": 10},
            "data": {"source": "synth", "samples": 20},
        }
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps(doc))
        out_dir = tmp_path / "dataset"
        assert main(["synth", "--config", str(cfg), "--out", str(out_dir)]) == 0
        assert (out_dir / "data_batch_1.bin").stat().st_size == 16 * 3073
        assert (out_dir / "test_batch.bin").stat().st_size == 4 * 3073

        from ravit.data import load_cifar10

        ds = load_cifar10(out_dir)
        assert len(ds.train_images) == 16
        assert len(ds.test_images) == 4

    def test_export_deterministic_bytes(self, tmp_path, capsys):
        doc = {
            "model": {"sides": [16, 32], "layers": [1, 1], "num_classes": 10},
            "data": {"source": "synth", "samples": 10},
        }
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps(doc))
        main(["synth", "--config", str(cfg), "--out", str(tmp_path / "a")])
        main(["synth", "--config", str(cfg), "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "data_batch_1.bin").read_bytes() == (tmp_path / "b" / "data_batch_1.bin").read_bytes()

    def test_wrong_side_exits_2(self, tmp_path, capsys):
        doc = {
            "model": {"sides": [8, 16], "layers": [1, 1], "embed_dim": 8, "hidden_dim": 32,
                      "heads": 2, "num_classes": 4},
            "data": {"source": "synth", "samples": 10},
        }
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps(doc))
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
