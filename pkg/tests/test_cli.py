import math

import numpy as np
import pytest

from censlmm.cli import main, read_report
from censlmm.data import read_long_csv


def run(args):
    return main(args)


@pytest.fixture(scope="module")
def simulated_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "bench.csv"
    code = run(["simulate", "--output", str(path), "--target-censoring", "0.152",
                "--seed", "2024"])
    assert code == 0
    return path


@pytest.fixture(scope="module")
def uncensored_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "clean.csv"
    code = run(["simulate", "--output", str(path), "--threshold", "-1e10",
                "--n-subjects", "20", "--seed", "11"])
    assert code == 0
    return path


class TestSimulateCommand:
    def test_row_count(self, simulated_file):
        d = read_long_csv(simulated_file)
        assert d.n_rows == 250
        assert d.n_subjects == 50

    def test_single_replicate_fraction_plausible(self, simulated_file):
        d = read_long_csv(simulated_file)
        assert 0.05 < d.n_censored / d.n_rows < 0.30

    def test_deterministic_output(self, tmp_path):
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        args = ["simulate", "--target-censoring", "0.2", "--seed", "4", "--n-subjects", "12"]
        assert run(args + ["--output", str(p1)]) == 0
        assert run(args + ["--output", str(p2)]) == 0
        assert p1.read_text() == p2.read_text()

    def test_requires_exactly_one_limit(self, tmp_path):
        code = run(["simulate", "--output", str(tmp_path / "x.csv")])
        assert code == 1

    def test_unwritable_output(self):
        code = run(["simulate", "--output", "/nonexistent-dir/x.csv",
                    "--target-censoring", "0.2"])
        assert code == 1


class TestFitCommand:
    def test_missing_input_is_exit_1(self, tmp_path):
        out = tmp_path / "report.txt"
        code = run(["fit", "--input", str(tmp_path / "absent.csv"), "--output", str(out)])
        assert code == 1
        assert not out.exists()

    def test_three_method_table(self, simulated_file, tmp_path, capsys):
        out = tmp_path / "report.txt"
        code = run(["fit", "--input", str(simulated_file), "--output", str(out),
                    "--method", "naive", "--method", "marginal", "--method", "agq",
                    "--threads", "1"])
        assert code == 0
        records = read_report(out)
        assert [r["method"] for r in records] == ["naive", "marginal", "agq"]
        slopes = {r["method"]: float(r["est.slope"]) for r in records}
        assert slopes["naive"] < slopes["marginal"]
        assert slopes["naive"] < slopes["agq"]
        table = capsys.readouterr().out
        assert "naive" in table and "marginal" in table

    def test_uncensored_methods_coincide(self, uncensored_file, tmp_path):
        out = tmp_path / "report.txt"
        code = run(["fit", "--input", str(uncensored_file), "--output", str(out),
                    "--method", "naive", "--method", "marginal", "--method", "agq",
                    "--threads", "1"])
        assert code == 0
        records = read_report(out)
        keys = [k for k in records[0] if k.startswith("est.")]
        for key in keys:
            vals = [float(r[key]) for r in records]
            assert max(vals) - min(vals) <= 1e-4, key

    def test_report_is_stable_given_seed(self, uncensored_file, tmp_path):
        outs = []
        for name in ("r1.txt", "r2.txt"):
            out = tmp_path / name
            code = run(["fit", "--input", str(uncensored_file), "--output", str(out),
                        "--method", "marginal", "--seed", "3", "--threads", "1"])
            assert code == 0
            outs.append(out.read_text())
        assert outs[0] == outs[1]


class TestCompareCommand:
    def test_benchmark_within_default_tolerance(self, simulated_file, tmp_path):
        out = tmp_path / "cmp.txt"
        code = run(["compare", "--input", str(simulated_file), "--output", str(out),
                    "--threads", "1"])
        assert code == 0
        records = read_report(out)
        cmp_rec = records[-1]
        assert cmp_rec["record"] == "compare"
        assert float(cmp_rec["max_diff"]) <= 0.01
        assert cmp_rec["within_tolerance"] == "1"

    def test_uncensored_tight_agreement(self, uncensored_file, tmp_path):
        out = tmp_path / "cmp.txt"
        code = run(["compare", "--input", str(uncensored_file), "--output", str(out),
                    "--tolerance", "1e-4", "--threads", "1"])
        assert code == 0
        assert float(read_report(out)[-1]["max_diff"]) <= 1e-4

    def test_tiny_gh_order_flags_discrepancy_without_crash(self, simulated_file, tmp_path):
        out = tmp_path / "cmp.txt"
        code = run(["compare", "--input", str(simulated_file), "--output", str(out),
                    "--gh-order", "1", "--tolerance", "1e-6", "--threads", "1"])
        assert code in (0, 2)
        records = read_report(out)
        cmp_rec = records[-1]
        assert "max_diff" in cmp_rec
        # order 1 is a Laplace approximation: the report must expose the gap
        assert float(cmp_rec["max_diff"]) > 1e-6
        assert cmp_rec["within_tolerance"] == "0"
        assert code == 2

    def test_impossible_tolerance_exit_2(self, uncensored_file, tmp_path):
        out = tmp_path / "cmp.txt"
        code = run(["compare", "--input", str(uncensored_file), "--output", str(out),
                    "--tolerance", "1e-300", "--threads", "1"])
        assert code == 2
