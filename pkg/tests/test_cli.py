import csv
import json
from pathlib import Path

import pytest

from betaend import cli

QUICK = ["--max-evals", "1500", "--restarts", "1"]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    gen = out / "gen.json"
    gen.write_text(json.dumps({"n_users": 2500, "n_courses": 6, "n_noncert_courses": 2}))
    assert run("simulate", "--generator-config", gen, "--seed", 3, "--out-dir", out) == 0
    return out


@pytest.fixture(scope="module")
def fitted(sim):
    assert run("fit", sim / "events.csv", "--out-dir", sim, *QUICK) == 0
    return sim


def write_events(path, lines):
    path.write_text("user_id,course_id,timestamp,certified,age\n" + "".join(l + "\n" for l in lines))
    return path


class TestSimulate:
    def test_preset(self, tmp_path, capsys):
        assert run("simulate", "--preset", "fun-like", "--n-users", 300, "--out-dir", tmp_path) == 0
        assert (tmp_path / "events.csv").stat().st_size > 0
        truth = json.loads((tmp_path / "ground_truth.json").read_text())
        assert truth["beta"] == 0.13 and len(truth["courses"]) == 140
        assert "users=300" in capsys.readouterr().out

    def test_seed_determinism(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            assert run("simulate", "--n-users", 200, "--seed", 7, "--out-dir", d) == 0
        assert (a / "events.csv").read_bytes() == (b / "events.csv").read_bytes()

    def test_zero_users(self, tmp_path):
        assert run("simulate", "--n-users", 0, "--out-dir", tmp_path) == 0
        assert rows(tmp_path / "events.csv") == []

    def test_unknown_preset(self, tmp_path, capsys):
        assert run("simulate", "--preset", "nope", "--out-dir", tmp_path) == 2
        assert "fun-like" in capsys.readouterr().err

    def test_bad_generator_config(self, tmp_path):
        gen = tmp_path / "g.json"
        gen.write_text(json.dumps({"n_courses": 2, "n_noncert_courses": 0, "burst_size": {"5": 1.0}}))
        assert run("simulate", "--generator-config", gen, "--out-dir", tmp_path) == 2


class TestCluster:
    def test_three_events(self, tmp_path):
        ev = write_events(tmp_path / "e.csv", ["u,a,0,0,", "u,b,3600,1,", "u,c,172800,0,"])
        assert run("cluster", ev, "--out-dir", tmp_path) == 0
        assigned = rows(tmp_path / "bursts.csv")
        assert len(assigned) == 3
        assert [r["burst_size"] for r in assigned] == ["2", "2", "1"]
        assert len(rows(tmp_path / "gap_histogram.csv")) == 50

    def test_sweep(self, tmp_path):
        ev = write_events(tmp_path / "e.csv", ["u,a,0,0,", "u,b,36000,1,"])
        assert run("cluster", ev, "--sweep", "4h,6h,8h,24h", "--out-dir", tmp_path) == 0
        sweep = rows(tmp_path / "threshold_sweep.csv")
        assert [int(r["total_bursts"]) for r in sweep] == [2, 2, 2, 1]

    def test_missing_file(self, tmp_path, capsys):
        assert run("cluster", tmp_path / "absent.csv", "--out-dir", tmp_path) == 2
        assert "absent.csv" in capsys.readouterr().err

    def test_empty_input(self, tmp_path):
        ev = write_events(tmp_path / "e.csv", [])
        assert run("cluster", ev, "--out-dir", tmp_path) == 0
        assert rows(tmp_path / "bursts.csv") == []
        assert all(int(r["count"]) == 0 for r in rows(tmp_path / "gap_histogram.csv"))

    def test_rejections_reported(self, tmp_path):
        ev = write_events(tmp_path / "e.csv", ["u,a,0,0,", "u,b,oops,0,"])
        assert run("cluster", ev, "--out-dir", tmp_path) == 0
        assert rows(tmp_path / "rejections.csv") == [{"line": "3", "reason": "bad timestamp 'oops'"}]

    def test_config_file_and_flag_precedence(self, tmp_path):
        ev = write_events(tmp_path / "e.csv", ["u,a,0,0,", "u,b,36000,1,"])
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"threshold": "12h", "sweep": [3600]}))
        assert run("cluster", ev, "--config", conf, "--out-dir", tmp_path) == 0
        assert {r["burst_size"] for r in rows(tmp_path / "bursts.csv")} == {"2"}
        assert run("--config", conf, "cluster", ev, "--threshold", "1h", "--out-dir", tmp_path) == 0
        assert {r["burst_size"] for r in rows(tmp_path / "bursts.csv")} == {"1"}

    def test_bad_config(self, tmp_path):
        ev = write_events(tmp_path / "e.csv", ["u,a,0,0,"])
        conf = tmp_path / "c.json"
        conf.write_text(json.dumps({"no_such_key": 1}))
        assert run("cluster", ev, "--config", conf) == 2
        assert run("cluster", ev, "--config", tmp_path / "missing.json") == 2


class TestFit:
    def test_both_documents(self, fitted):
        for model in ("betaend", "logistic"):
            doc = json.loads((fitted / f"fit_{model}.json").read_text())
            assert doc["model"] == model and doc["n_free_parameters"] == 7
            assert doc["config"]["split"] == {"seed": 0, "train_fraction": 0.8}

    def test_rerun_identical(self, fitted, tmp_path):
        assert run("fit", fitted / "events.csv", "--out-dir", tmp_path, "--threads", 2, *QUICK) == 0
        for model in ("betaend", "logistic"):
            a = json.loads((fitted / f"fit_{model}.json").read_text())
            b = json.loads((tmp_path / f"fit_{model}.json").read_text())
            a.pop("created"), b.pop("created")
            assert a == b

    def test_all_singleton_warns(self, tmp_path, caplog):
        ev = write_events(tmp_path / "e.csv", [f"u{i},c{i % 3},{i},{int(i % 4 == 0)}," for i in range(60)])
        assert run("fit", ev, "--model", "betaend", "--out-dir", tmp_path, *QUICK) == 0
        assert json.loads((tmp_path / "fit_betaend.json").read_text())["degenerate"] is True
        assert "degenerate" in caplog.text

    def test_non_convergence_is_not_failure(self, sim, tmp_path):
        assert run("fit", sim / "events.csv", "--model", "logistic", "--max-evals", 50, "--out-dir", tmp_path) == 0
        assert json.loads((tmp_path / "fit_logistic.json").read_text())["converged"] is False

    @pytest.mark.parametrize("fraction", ["1.0", "0", "1.5"])
    def test_train_fraction_guard(self, sim, tmp_path, fraction):
        assert run("fit", sim / "events.csv", "--train-fraction", fraction, "--out-dir", tmp_path) == 2


@pytest.fixture(scope="module")
def evaluated(fitted):
    out = fitted / "eval"
    assert run("evaluate", fitted / "events.csv", "--fit", fitted / "fit_betaend.json", "--fit", fitted / "fit_logistic.json", "--out-dir", out) == 0
    return out


class TestEvaluate:
    def _one(self, out, prefix, suffix=".csv"):
        (path,) = Path(out).glob(f"{prefix}_betaend-logistic_*{suffix}")
        return path

    def test_all_tables_written(self, evaluated):
        for prefix in ("calibration", "cohorts", "burst_curve", "trends_age", "trends_burst-ordinal", "trends_within-burst-order"):
            assert self._one(evaluated, prefix).exists()
            assert self._one(evaluated, prefix, ".json").exists()
        assert self._one(evaluated, "heatmap", ".json").exists()

    def test_paired_columns(self, evaluated):
        curve = rows(self._one(evaluated, "burst_curve"))
        assert {"predicted_betaend", "predicted_logistic"} <= set(curve[0])
        cal = rows(self._one(evaluated, "calibration"))
        assert {r["model"] for r in cal} == {"betaend", "logistic"}

    def test_summary(self, evaluated):
        s = json.loads(self._one(evaluated, "summary", ".json").read_text())
        assert s["certificates_per_burst"] >= s["raw_certificate_rate"]
        assert s["n_cohorts"] <= s["possible_cohorts"] == 30
        assert set(s["test_nll"]) == {"betaend", "logistic"}

    def test_test_split_only(self, fitted, evaluated):
        s = json.loads(self._one(evaluated, "summary", ".json").read_text())
        total = sum(int(r["certified"]) >= 0 for r in rows(fitted / "events.csv"))
        assert 0 < s["n_test_events"] < 0.4 * total

    def test_course_universe_mismatch(self, fitted, tmp_path, capsys):
        ev = write_events(tmp_path / "e.csv", ["u,zz9,0,1,", "v,zz9,0,0,"])
        assert run("evaluate", ev, "--fit", fitted / "fit_betaend.json", "--out-dir", tmp_path) == 2
        assert "zz9" in capsys.readouterr().err

    def test_missing_fit(self, fitted, tmp_path):
        assert run("evaluate", fitted / "events.csv", "--fit", tmp_path / "none.json") == 2


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2
