import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from fedxfer.cli import main

QUICK = ["--max-iter", "4", "--warmup", "1", "--hidden", "8", "--latent-dim", "4"]


def read(p):
    return p.read_bytes()


class TestUsage:
    def test_no_subcommand(self, capsys):
        assert main([]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self, tmp_path, capsys):
        assert main(["gen-data", "--synthetic", "easy", "--out", str(tmp_path), "--bogus"]) == 1
        err = capsys.readouterr().err
        assert "--bogus" in err and "usage" in err

    def test_missing_out(self):
        assert main(["gen-data", "--synthetic", "easy"]) == 1

    def test_two_sources(self, tmp_path):
        assert main(["split", "--synthetic", "easy", "--data", "x.csv", "--out", str(tmp_path)]) == 1

    def test_runtime_error_is_two(self, tmp_path, fixtures, capsys):
        code = main(["train-ftl", "--case", "CASE1", "--data", str(fixtures / "kdd_sample.csv"),
                     "--schema", "kdd", "--out", str(tmp_path)])
        assert code == 2
        assert "SplitError" in capsys.readouterr().err

    def test_warmup_not_below_max_iter(self, tmp_path, capsys):
        assert main(["train-ftl", "--synthetic", "easy", "--max-iter", "5", "--out", str(tmp_path)]) == 2
        assert "warmup" in capsys.readouterr().err


class TestCommands:
    def test_gen_data_reproducible(self, tmp_path):
        for d in ("a", "b"):
            assert main(["gen-data", "--synthetic", "weak-target", "--seed", "4", "--out", str(tmp_path / d)]) == 0
        assert read(tmp_path / "a" / "dataset.csv") == read(tmp_path / "b" / "dataset.csv")
        rows = list(csv.reader(open(tmp_path / "a" / "dataset.csv")))
        assert len(rows) == 2001 and len(rows[0]) == 21

    def test_split_outputs(self, tmp_path):
        assert main(["split", "--synthetic", "weak-target", "--seed", "2", "--out", str(tmp_path)]) == 0
        plan = json.loads((tmp_path / "split.json").read_text())
        assert len(plan["overlap_a"]) == 100 and len(plan["features_a"]) == 10
        header_b = (tmp_path / "party_b.csv").read_text().splitlines()[0]
        assert "label" not in header_b
        assert len((tmp_path / "sealed_b_labels.csv").read_text().splitlines()) == 1001

    def test_split_from_generated_csv_matches_synthetic(self, tmp_path):
        main(["gen-data", "--synthetic", "weak-target", "--seed", "2", "--out", str(tmp_path / "g")])
        main(["split", "--data", str(tmp_path / "g" / "dataset.csv"), "--n-labeled", "1100",
              "--n-unlabeled", "1000", "--seed", "2", "--out", str(tmp_path / "s1")])
        main(["split", "--synthetic", "weak-target", "--seed", "2", "--out", str(tmp_path / "s2")])
        assert read(tmp_path / "s1" / "split.json") == read(tmp_path / "s2" / "split.json")

    def test_train_ftl_reproducible(self, tmp_path):
        for d in ("a", "b"):
            args = ["train-ftl", "--synthetic", "weak-target", "--seed", "1", "--out", str(tmp_path / d)]
            assert main(args + QUICK) == 0
        for name in ("trace.csv", "model_a.json", "model_b.json", "predictions.csv", "summary.json"):
            assert read(tmp_path / "a" / name) == read(tmp_path / "b" / name), name
        trace = (tmp_path / "a" / "trace.csv").read_text().splitlines()
        assert trace[0] == "run,iteration,j_b,j_ab,j_a_reg,j_b_reg,total" and len(trace) == 5

    def test_train_ftl_kdd_schema(self, tmp_path, fixtures):
        rows = (fixtures / "kdd_sample.csv").read_text().splitlines()
        rng = np.random.default_rng(0)
        out = []
        for i in range(60):
            f = rows[i % len(rows)].split(",")
            f[4] = str(int(f[4]) + int(rng.integers(0, 50)))
            out.append(",".join(f))
        data = tmp_path / "kdd.csv"
        data.write_text("\n".join(out) + "\n")
        code = main(["train-ftl", "--data", str(data), "--schema", "kdd", "--n-labeled", "30",
                     "--n-unlabeled", "30", "--overlap", "0.2", "--out", str(tmp_path / "o")] + QUICK)
        assert code == 0
        assert json.loads((tmp_path / "o" / "summary.json").read_text())["iterations"] == 4

    def test_train_udl(self, tmp_path):
        assert main(["train-udl", "--synthetic", "easy", "--ae-epochs", "2", "--out", str(tmp_path)]) == 0
        trace = (tmp_path / "trace.csv").read_text().splitlines()
        assert len(trace) == 4 and trace[1].startswith("0,0,,,,,")
        assert len((tmp_path / "scores.csv").read_text().splitlines()) == 901

    def test_experiment_and_report(self, tmp_path, capsys):
        exp = tmp_path / "exp"
        args = ["experiment", "--synthetic", "easy", "--runs", "2", "--ae-epochs", "2", "--out", str(exp)]
        assert main(args + QUICK) == 0
        for name in ("report.csv", "report.json", "traces_ftl.csv", "traces_udl.csv"):
            assert (exp / name).is_file()
        capsys.readouterr()
        assert main(["report", "--in", str(exp), "--out", str(tmp_path / "rep")]) == 0
        table = capsys.readouterr().out
        assert "FTL" in table and "UDL" in table
        assert read(tmp_path / "rep" / "report.csv") == read(exp / "report.csv")

    def test_config_precedence(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"max_iter": 6, "warmup": 1, "hidden": "8", "latent_dim": 4}))
        base = ["train-ftl", "--synthetic", "easy", "--config", str(cfg)]
        assert main(base + ["--out", str(tmp_path / "c")]) == 0
        assert main(base + ["--max-iter", "3", "--out", str(tmp_path / "f")]) == 0
        it = lambda d: json.loads((tmp_path / d / "summary.json").read_text())["iterations"]
        assert (it("c"), it("f")) == (6, 3)

    def test_writes_only_under_out(self, tmp_path):
        work = tmp_path / "cwd"
        work.mkdir()
        env = dict(os.environ, FEDXFER_LOG="info")
        proc = subprocess.run(
            [sys.executable, "-m", "fedxfer.cli", "split", "--synthetic", "easy", "--out", "o"],
            cwd=work, env=env, capture_output=True, text=True,
        )
        assert proc.returncode == 0 and proc.stdout == ""
        assert [p.name for p in work.iterdir()] == ["o"]
