"""End-to-end command-line runs via main(argv)."""

import numpy as np
import pytest

from hpgee2.cli import main


@pytest.fixture(scope="module")
def sim_files(tmp_path_factory):
    """One simulated dataset shared by the fit/tune tests."""
    prefix = str(tmp_path_factory.mktemp("clidata") / "demo")
    rc = main(
        [
            "simulate",
            "--n-clusters", "100",
            "--cluster-size", "5",
            "--seed", "7",
            "--out", prefix,
        ]
    )
    assert rc == 0
    return f"{prefix}_units.csv", f"{prefix}_pairs.csv"


class TestSimulate:
    def test_writes_both_files_with_provenance(self, tmp_path, capsys):
        prefix = str(tmp_path / "sim")
        rc = main(["simulate", "--n-clusters", "12", "--seed", "3", "--out", prefix])
        assert rc == 0
        out = capsys.readouterr().out
        assert out.startswith("# hpgee2 simulate")
        assert "wrote" in out
        units = open(f"{prefix}_units.csv").read()
        pairs = open(f"{prefix}_pairs.csv").read()
        assert units.startswith("# hpgee2 simulate")
        assert "seed=3" in units
        assert "cluster_id,unit_id,y," in units
        assert "cluster_id,unit_j,unit_k," in pairs
        # 12 clusters of 5 -> 60 unit rows, 120 pair rows
        assert sum(1 for l in units.splitlines() if l and not l.startswith("#")) == 61
        assert sum(1 for l in pairs.splitlines() if l and not l.startswith("#")) == 121

    def test_same_seed_same_bytes(self, tmp_path):
        p1, p2 = str(tmp_path / "a"), str(tmp_path / "b")
        for prefix in (p1, p2):
            assert main(["simulate", "--n-clusters", "8", "--seed", "11", "--out", prefix]) == 0
        u1 = open(f"{p1}_units.csv", "rb").read()
        u2 = open(f"{p2}_units.csv", "rb").read()
        assert u1 == u2
        assert main(["simulate", "--n-clusters", "8", "--seed", "12", "--out", p2]) == 0
        assert open(f"{p2}_units.csv", "rb").read() != u1

    def test_missing_required_option(self, capsys):
        rc = main(["simulate", "--seed", "1"])
        assert rc == 1
        assert "missing required option --n-clusters" in capsys.readouterr().err


class TestFit:
    def test_unpenalized_text_output(self, sim_files, tmp_path, capsys):
        units, pairs = sim_files
        out = str(tmp_path / "fit.txt")
        rc = main(["fit", "--units", units, "--pairs", pairs, "--out", out])
        assert rc == 0
        assert capsys.readouterr().out == ""
        text = open(out).read()
        assert text.startswith("# hpgee2 fit")
        assert "mode: joint" in text
        assert "Mean model (logit link):" in text
        assert "x1" in text and "w1" in text

    def test_penalized_needs_lambda(self, sim_files, capsys):
        units, pairs = sim_files
        rc = main(["fit", "--units", units, "--pairs", pairs, "--penalty", "scad"])
        assert rc == 1
        assert "needs --lambda" in capsys.readouterr().err

    def test_csv_format_and_sparsity(self, sim_files, capsys):
        units, pairs = sim_files
        rc = main(
            [
                "fit",
                "--units", units,
                "--pairs", pairs,
                "--penalty", "scad",
                "--lambda", "0.08",
                "--format", "csv",
            ]
        )
        assert rc == 0
        out = capsys.readouterr().out
        lines = out.splitlines()
        assert "block,name,estimate,se" in lines
        body = [l.split(",") for l in lines[lines.index("block,name,estimate,se") + 1:]]
        assert len(body) == 22  # 11 mean + 11 association coefficients
        # the penalty should zero something, and zeros carry no SE
        zero_rows = [r for r in body if r[2] == "0"]
        assert zero_rows and all(r[3] == "" for r in zero_rows)

    def test_link_flag_roundtrip(self, sim_files, capsys):
        units, pairs = sim_files
        rc = main(
            [
                "fit",
                "--units", units,
                "--pairs", pairs,
                "--penalty", "scad",
                "--lambda", "0.08",
                "--link", "x2:w2,v2",
            ]
        )
        assert rc == 0
        assert "link=x2:w2,v2" in capsys.readouterr().out

    def test_link_unknown_name(self, sim_files, capsys):
        units, pairs = sim_files
        rc = main(
            ["fit", "--units", units, "--pairs", pairs, "--link", "nope:w1"]
        )
        assert rc == 1
        assert "--link mean coefficient" in capsys.readouterr().err

    def test_bad_data_file(self, tmp_path, capsys):
        up = tmp_path / "u.csv"
        pp = tmp_path / "p.csv"
        up.write_text("cluster_id,unit_id,y,x1\na,0,3,0.5\n")
        pp.write_text("cluster_id,unit_j,unit_k,w1\n")
        rc = main(["fit", "--units", str(up), "--pairs", str(pp)])
        assert rc == 1
        assert "hpgee2: error:" in capsys.readouterr().err

    def test_deterministic_reruns_byte_identical(self, sim_files, tmp_path):
        units, pairs = sim_files
        out = str(tmp_path / "fit.csv")
        argv = [
            "fit",
            "--units", units,
            "--pairs", pairs,
            "--penalty", "lasso",
            "--lambda", "0.05",
            "--format", "csv",
            "--out", out,
        ]
        assert main(argv) == 0
        first = open(out, "rb").read()
        assert main(argv) == 0
        assert open(out, "rb").read() == first


class TestTune:
    def test_grid_flag_is_honored(self, sim_files, capsys):
        units, pairs = sim_files
        rc = main(
            [
                "tune",
                "--units", units,
                "--pairs", pairs,
                "--penalty", "scad",
                "--grid", "0.02:0.2:4",
                "--format", "csv",
            ]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "grid=0.02:0.2:4" in out
        header = out.splitlines().index("lambda,bic,n_active_mean,n_active_assoc,error")
        path_rows = []
        for line in out.splitlines()[header + 1:]:
            if line.startswith("#"):
                break
            path_rows.append(line)
        assert len(path_rows) == 4
        lams = [float(r.split(",")[0]) for r in path_rows]
        assert lams[0] == pytest.approx(0.02) and lams[-1] == pytest.approx(0.2)
        assert "chosen lambda=" in out

    def test_text_report_marks_choice(self, sim_files, capsys):
        units, pairs = sim_files
        rc = main(
            [
                "tune",
                "--units", units,
                "--pairs", pairs,
                "--penalty", "lasso",
                "--grid", "0.02:0.1:3",
            ]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "chosen lambda:" in out
        assert " *" in out

    def test_rejects_penalty_none(self, sim_files, capsys):
        units, pairs = sim_files
        rc = main(
            ["tune", "--units", units, "--pairs", pairs, "--penalty", "none"]
        )
        assert rc == 1
        assert "tune requires" in capsys.readouterr().err

    def test_malformed_grid(self, sim_files, capsys):
        units, pairs = sim_files
        rc = main(
            [
                "tune",
                "--units", units,
                "--pairs", pairs,
                "--penalty", "scad",
                "--grid", "0.1:4",
            ]
        )
        assert rc == 1
        assert "grid must be LO:HI:N" in capsys.readouterr().err


class TestReplicate:
    def test_csv_summary(self, capsys):
        rc = main(
            [
                "replicate",
                "--n-clusters", "60",
                "--cluster-size", "4",
                "--replicates", "2",
                "--penalty", "scad",
                "--grid", "0.03:0.2:3",
                "--seed", "5",
                "--format", "csv",
            ]
        )
        assert rc == 0
        out = capsys.readouterr().out
        assert "penalty,n,lambda_mean,ps_mean,ps_sd,fd_mean,fd_sd,failures" in out
        row = next(l for l in out.splitlines() if l.startswith("scad,60,"))
        cells = row.split(",")
        # joint mode counts both blocks: 4 true mean + 3 true association coords
        assert 0.0 <= float(cells[3]) <= 7.0
        assert cells[7] == "0"


class TestConfigFile:
    def test_file_values_with_flag_override(self, tmp_path, capsys):
        cfg = tmp_path / "sim.cfg"
        prefix = str(tmp_path / "out")
        cfg.write_text(
            "# study settings\n"
            "n-clusters=9\n"
            "cluster-size=3\n"
            "seed=2\n"
            f"out={prefix}\n"
        )
        rc = main(["simulate", "--config", str(cfg), "--seed", "6"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "n-clusters=9" in out
        assert "seed=6" in out  # flag beats file
        units = open(f"{prefix}_units.csv").read()
        assert "seed=6" in units

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("n-clusters=5\nturbo=yes\n")
        rc = main(["simulate", "--config", str(cfg)])
        assert rc == 1
        assert "unknown config keys" in capsys.readouterr().err

    def test_missing_file(self, capsys):
        rc = main(["simulate", "--n-clusters", "5", "--config", "/nonexistent.cfg"])
        assert rc == 1
        assert "cannot read config file" in capsys.readouterr().err

    def test_malformed_line(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("n-clusters 5\n")
        rc = main(["simulate", "--config", str(cfg)])
        assert rc == 1
        assert "expected key=value" in capsys.readouterr().err
