"""File round trips, format validation, and fit reports."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import make_dataset
from hpgee2.errors import DataFormatError
from hpgee2.io import load_dataset, report_fit, report_fit_csv, write_dataset
from hpgee2.penalty import PenaltyConfig
from hpgee2.solver import fit_hpgee2


def names_for(dataset):
    mean = ["intercept"] + [f"x{i}" for i in range(1, dataset.p)]
    assoc = ["intercept"] + [f"w{i}" for i in range(1, dataset.q)]
    return mean, assoc


def test_write_load_round_trip_is_exact(tmp_path):
    ds = make_dataset(seed=4, n=7, size=4)
    mean_names, assoc_names = names_for(ds)
    up, pp = tmp_path / "units.csv", tmp_path / "pairs.csv"
    write_dataset(ds, up, pp, mean_names, assoc_names, comments=["provenance line"])

    loaded, mnames, anames = load_dataset(up, pp)
    assert mnames == mean_names
    assert anames == assoc_names
    assert loaded.n_clusters == ds.n_clusters
    for a, b in zip(ds.clusters, loaded.clusters):
        assert b.cluster_id == a.cluster_id
        # repr() serialization must survive the trip bit for bit
        assert_allclose(b.y, a.y, rtol=0, atol=0)
        assert_allclose(b.x, a.x, rtol=0, atol=0)
        assert_allclose(b.z, a.z, rtol=0, atol=0)


def test_comment_preamble_and_blank_lines(tmp_path):
    up, pp = tmp_path / "u.csv", tmp_path / "p.csv"
    up.write_text(
        "# made by hand\n"
        "\n"
        "# another comment\n"
        "cluster_id,unit_id,y,x1\n"
        "a,0,1,0.5\n"
        "a,1,0,-0.5\n"
    )
    pp.write_text("# pairs\ncluster_id,unit_j,unit_k,w1\na,0,1,1.0\n")
    ds, mnames, _ = load_dataset(up, pp)
    assert mnames == ["intercept", "x1"]
    assert ds.n_clusters == 1
    assert_allclose(ds.clusters[0].x[:, 1], [0.5, -0.5])


def _write_pair(tmp_path, units_text, pairs_text):
    up, pp = tmp_path / "u.csv", tmp_path / "p.csv"
    up.write_text(units_text)
    pp.write_text(pairs_text)
    return up, pp


GOOD_UNITS = "cluster_id,unit_id,y,x1\na,0,1,0.5\na,1,0,-0.5\n"
GOOD_PAIRS = "cluster_id,unit_j,unit_k,w1\na,0,1,1.0\n"


class TestLoadErrors:
    def test_empty_file(self, tmp_path):
        up, pp = _write_pair(tmp_path, "# only comments\n", GOOD_PAIRS)
        with pytest.raises(DataFormatError, match="no header"):
            load_dataset(up, pp)

    def test_bad_header(self, tmp_path):
        up, pp = _write_pair(tmp_path, "id,unit,y,x1\na,0,1,0.5\n", GOOD_PAIRS)
        with pytest.raises(DataFormatError, match="header must start with"):
            load_dataset(up, pp)

    def test_ragged_row(self, tmp_path):
        up, pp = _write_pair(
            tmp_path, "cluster_id,unit_id,y,x1\na,0,1,0.5,9\na,1,0,-0.5\n", GOOD_PAIRS
        )
        with pytest.raises(DataFormatError, match="expected 4 columns"):
            load_dataset(up, pp)

    def test_outcome_not_binary(self, tmp_path):
        up, pp = _write_pair(
            tmp_path, "cluster_id,unit_id,y,x1\na,0,2,0.5\na,1,0,-0.5\n", GOOD_PAIRS
        )
        with pytest.raises(DataFormatError, match="0 or 1"):
            load_dataset(up, pp)

    def test_outcome_not_numeric(self, tmp_path):
        up, pp = _write_pair(
            tmp_path, "cluster_id,unit_id,y,x1\na,0,yes,0.5\na,1,0,-0.5\n", GOOD_PAIRS
        )
        with pytest.raises(DataFormatError, match="not numeric"):
            load_dataset(up, pp)

    def test_non_numeric_covariate(self, tmp_path):
        up, pp = _write_pair(
            tmp_path, "cluster_id,unit_id,y,x1\na,0,1,oops\na,1,0,-0.5\n", GOOD_PAIRS
        )
        with pytest.raises(DataFormatError, match="non-numeric covariate"):
            load_dataset(up, pp)

    def test_duplicate_unit(self, tmp_path):
        up, pp = _write_pair(
            tmp_path, "cluster_id,unit_id,y,x1\na,0,1,0.5\na,0,0,-0.5\n", GOOD_PAIRS
        )
        with pytest.raises(DataFormatError, match="duplicate unit"):
            load_dataset(up, pp)

    def test_pair_for_unknown_cluster(self, tmp_path):
        up, pp = _write_pair(
            tmp_path, GOOD_UNITS, "cluster_id,unit_j,unit_k,w1\nb,0,1,1.0\n"
        )
        with pytest.raises(DataFormatError, match="does not appear"):
            load_dataset(up, pp)

    def test_pair_for_unknown_unit(self, tmp_path):
        up, pp = _write_pair(
            tmp_path, GOOD_UNITS, "cluster_id,unit_j,unit_k,w1\na,0,7,1.0\n"
        )
        with pytest.raises(DataFormatError, match="unknown unit"):
            load_dataset(up, pp)

    def test_pair_orientation(self, tmp_path):
        up, pp = _write_pair(
            tmp_path, GOOD_UNITS, "cluster_id,unit_j,unit_k,w1\na,1,0,1.0\n"
        )
        with pytest.raises(DataFormatError, match="earlier"):
            load_dataset(up, pp)

    def test_missing_pair_rows(self, tmp_path):
        units = (
            "cluster_id,unit_id,y,x1\na,0,1,0.5\na,1,0,-0.5\na,2,1,0.1\n"
        )
        pairs = "cluster_id,unit_j,unit_k,w1\na,0,1,1.0\na,0,2,1.0\n"
        up, pp = _write_pair(tmp_path, units, pairs)
        with pytest.raises(DataFormatError, match="needs 3 pair rows"):
            load_dataset(up, pp)

    def test_pairs_out_of_order(self, tmp_path):
        units = (
            "cluster_id,unit_id,y,x1\na,0,1,0.5\na,1,0,-0.5\na,2,1,0.1\n"
        )
        pairs = (
            "cluster_id,unit_j,unit_k,w1\n"
            "a,0,2,1.0\na,0,1,1.0\na,1,2,1.0\n"
        )
        up, pp = _write_pair(tmp_path, units, pairs)
        with pytest.raises(DataFormatError, match="lexicographic order"):
            load_dataset(up, pp)


class TestWriteErrors:
    def test_name_length_mismatch(self, tmp_path):
        ds = make_dataset(seed=1, n=3, size=3)
        with pytest.raises(DataFormatError, match="names must match"):
            write_dataset(ds, tmp_path / "u.csv", tmp_path / "p.csv", ["a"], ["b"])

    def test_requires_intercept_column(self, tmp_path):
        ds = make_dataset(seed=1, n=3, size=3)
        # break the intercept in one cluster's mean design
        broken = ds.clusters[0].x.copy()
        broken[0, 0] = 2.0
        from hpgee2.data import ClusterData, Dataset

        bad = Dataset(
            [ClusterData("c0", ds.clusters[0].y, broken, ds.clusters[0].z)]
        )
        mean_names, assoc_names = names_for(bad)
        with pytest.raises(DataFormatError, match="intercept"):
            write_dataset(bad, tmp_path / "u.csv", tmp_path / "p.csv", mean_names, assoc_names)


@pytest.fixture(scope="module")
def sparse_fit():
    ds = make_dataset(seed=11, n=80, size=3)
    cfg = PenaltyConfig(kind="scad", lam=0.15, exclude=frozenset({0}))
    fit = fit_hpgee2(ds, cfg_mean=cfg, cfg_assoc=cfg)
    assert (fit.beta == 0.0).any(), "report tests want at least one exact zero"
    return ds, fit


class TestReports:
    def test_text_report(self, sparse_fit):
        ds, fit = sparse_fit
        mean_names, assoc_names = names_for(ds)
        text = report_fit(fit, mean_names, assoc_names)
        assert "mode: joint" in text
        assert "penalty (mean): scad lambda=0.12" in text
        assert f"clusters: {ds.n_clusters}" in text
        assert "Mean model (logit link):" in text
        assert "Association model (log odds ratio link):" in text
        # exact zeros render as a bare 0, never 0.000
        zero_name = mean_names[int(np.flatnonzero(fit.beta == 0.0)[0])]
        row = next(l for l in text.splitlines() if l.strip().startswith(zero_name))
        assert row.split()[-1] == "0"
        # nonzeros render with three decimals
        live = int(np.flatnonzero(fit.beta)[0])
        row = next(l for l in text.splitlines() if l.strip().startswith(mean_names[live]))
        assert row.split()[-1] == f"{fit.beta[live]:.3f}"

    def test_text_report_blank_se_at_zeros(self, sparse_fit):
        ds, fit = sparse_fit
        from hpgee2.tuning import sandwich_covariance

        sc = sandwich_covariance(ds, fit)
        fit.se_beta, fit.se_alpha = sc.se_beta, sc.se_alpha
        mean_names, assoc_names = names_for(ds)
        text = report_fit(fit, mean_names, assoc_names)
        zero_name = mean_names[int(np.flatnonzero(fit.beta == 0.0)[0])]
        row = next(l for l in text.splitlines() if l.strip().startswith(zero_name))
        # name + estimate only; the std.err cell stays empty
        assert row.split() == [zero_name, "0"]

    def test_csv_report(self, sparse_fit):
        ds, fit = sparse_fit
        mean_names, assoc_names = names_for(ds)
        out = report_fit_csv(fit, mean_names, assoc_names)
        lines = out.strip().splitlines()
        assert lines[0] == "block,name,estimate,se"
        assert len(lines) == 1 + ds.p + ds.q
        cells = [l.split(",") for l in lines[1:]]
        for (block, name, est, se), want in zip(
            cells[: ds.p], np.asarray(fit.beta)
        ):
            assert block == "mean"
            if want == 0.0:
                assert est == "0" and se == ""
            else:
                assert float(est) == pytest.approx(want, rel=1e-9)
        assert {c[0] for c in cells} == {"mean", "association"}
