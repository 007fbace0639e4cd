import csv
import io
import json
import math
from fractions import Fraction

import numpy as np
import pytest

from floquet_growth import bench
from floquet_growth.cli import main


MODEL = {"kappa": 10, "psi": {"type": "square", "tau": "3/5"}, "a": 0.22,
         "grid": {"dx": 0.01, "steps_per_period": 100, "x_max": 3}}


def read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


class TestFormatting:
    def test_cells(self):
        assert bench.format_cell(Fraction(3, 10)) == "3/10"
        assert bench.format_cell(0.1) == "0.1"
        assert bench.format_cell(math.inf) == "inf"
        assert bench.format_cell(None) == ""
        assert bench.format_cell(np.int64(4)) == "4"
        assert bench.format_cell(True) == "true"

    def test_json_roundtrip(self):
        doc = json.loads(bench.rows_to_json([{"x": Fraction(1, 3), "y": np.float64(2.5), "z": math.inf}],
                                            {"tau": Fraction(1, 2)}))
        assert doc["rows"][0] == {"x": "1/3", "y": 2.5, "z": "inf"}
        assert doc["meta"]["tau"] == "1/2"

    def test_bad_thread_count(self, monkeypatch):
        monkeypatch.setenv("FG_THREADS", "many")
        with pytest.raises(ValueError):
            bench.worker_count()


class TestSweep:
    def test_offsets_avoid_edges(self):
        pts = bench.a_sweep(0.1, 0.3, 0.1)
        assert pts == pytest.approx([0.100001, 0.200001, 0.300001], abs=1e-15)
        assert bench.a_sweep(0.1, 0.3, 0.1, exact_edges=True) == [Fraction(1, 10), Fraction(1, 5), Fraction(3, 10)]

    def test_bad_sweep(self):
        with pytest.raises(ValueError):
            bench.a_sweep(1.0, 0.5, 0.1)


class TestSpecs:
    def test_unknown_fields(self):
        with pytest.raises(ValueError):
            bench.ExperimentSpec.from_dict({"name": "x", "template": "log2-over-a", "colour": 1})
        with pytest.raises(ValueError):
            bench.ExperimentSpec.from_dict({"name": "x", "template": "nope"})
        with pytest.raises(ValueError):
            bench.ExperimentSpec.from_dict({"name": "x", "template": "log2-over-a", "sweep": {"b1": 1}})

    def test_run_is_deterministic_with_workers(self, tmp_path):
        spec = bench.ExperimentSpec.from_dict({
            "name": "stair", "template": "staircase-tau05",
            "sweep": {"a_min": 0.2, "a_max": 0.6, "a_step": 0.1, "kappa": [20]},
            "grid": {"steps_per_period": 100}, "outputs": ["csv", "json", "plot"]})
        r1 = bench.run_experiment(spec, tmp_path / "one", workers=1)
        r2 = bench.run_experiment(spec, tmp_path / "two", workers=2)
        assert r1.status == 0
        for f1, f2 in zip(r1.files, r2.files):
            assert f1.read_bytes() == f2.read_bytes()
        rows = read_csv((tmp_path / "one" / "stair.csv").read_text())
        assert len(rows) == 5
        for row in rows:
            assert float(row["lambda"]) <= float(row["lambda_inf"]) + 10 * 0.01
        compile((tmp_path / "one" / "stair_plot.py").read_text(), "plot", "exec")

    def test_counterexample_template(self, tmp_path):
        spec = bench.ExperimentSpec.from_dict({"name": "cex", "template": "counterexample-surface",
                                               "sweep": {"resolution": 3}, "outputs": ["json"]})
        res = bench.run_experiment(spec, tmp_path)
        doc = json.loads(res.files[0].read_text())
        assert len(doc["rows"]) == 9


class TestLimitsProbe:
    def test_gap_sign(self):
        tab = bench.noncommuting_limits_probe(0.22, "0.6", 1, (1e-4, 0.2), (20.0, 100.0), steps_per_period=200)
        assert tab.kappa_first > tab.eps_first
        assert tab.theory_gap == pytest.approx(math.log(2) / 0.22 - 3 * math.log(2))
        assert tab.monotone(slack=1e-9)
        assert len(tab.rows()) == 4

    def test_unsorted_rejected(self):
        with pytest.raises(ValueError):
            bench.noncommuting_limits_probe(0.22, 0.6, 1, (0.2, 1e-4), (20.0,))


class TestCli:
    def test_staircase_exact_rows(self, capsys):
        assert main(["staircase", "--tau", "3/5", "--a-min", "0.22", "--a-max", "0.22",
                     "--step", "0.01", "--exact-edges"]) == 0
        rows = read_csv(capsys.readouterr().out)
        assert rows[0]["a"] == "11/50"
        assert rows[0]["N_a"] == "3"
        assert float(rows[0]["lambda_inf"]) == pytest.approx(3 * math.log(2))
        assert rows[0]["a_r"] == "3/10"

    def test_counterexample_json(self, tmp_path):
        out = tmp_path / "c.json"
        assert main(["counterexample", "--a2", "0", "--b2-range", "0,0", "--b1-range", "0,12",
                     "--resolution", "13", "--format", "json", "-o", str(out)]) == 0
        rows = json.loads(out.read_text())["rows"]
        lam = {r["b1"]: r["lambda"] for r in rows}
        for b1 in range(13):
            assert lam[float(b1)] == pytest.approx(max(5 - 0.5 * b1, 0), abs=1e-12)

    def test_eigen_with_adjoint(self, tmp_path, capsys):
        model = MODEL
        p = tmp_path / "m.json"
        p.write_text(json.dumps(model))
        assert main(["eigen", "--model", str(p), "--adjoint", "--format", "json"]) == 0
        row = json.loads(capsys.readouterr().out)["rows"][0]
        assert row["status"] == "ok"
        assert row["lambda_adjoint"] == pytest.approx(row["lambda"], abs=1e-9)

    def test_eigen_nonconverged_exit_code(self, tmp_path, capsys):
        model = MODEL
        p = tmp_path / "m.json"
        p.write_text(json.dumps(model))
        assert main(["eigen", "--model", str(p), "--max-iter", "3", "--tol", "1e-15"]) == 1
        assert "non_converged" in capsys.readouterr().out

    def test_errors_exit_two(self, tmp_path, capsys):
        assert main(["eigen", "--model", str(tmp_path / "missing.json")]) == 2
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"kappa": 1, "colour": "red"}))
        assert main(["eigen", "--model", str(bad)]) == 2
        assert "error" in capsys.readouterr().err

    def test_run_subcommand(self, tmp_path, capsys):
        spec = tmp_path / "s.json"
        spec.write_text(json.dumps({"name": "l2", "template": "log2-over-a",
                                    "sweep": {"kappa": [1, 5]}, "grid": {"steps_per_period": 100}}))
        assert main(["run", str(spec), "--out-dir", str(tmp_path)]) == 0
        rows = read_csv((tmp_path / "l2.csv").read_text())
        assert [r["status"] for r in rows] == ["ok", "ok"]
