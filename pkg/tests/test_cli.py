"""CLI tests: config parsing, exit codes, file outputs, summary lines."""

import json
import math

import pytest

from penpia.cli import ExperimentConfig, main
from penpia.driver import SchemeConfig
from penpia.errors import ValidationError
from penpia.problems import PenaltySchedule

MINIMAL = {
    "problem": "bm-lin",
    "mode": "mc_nonmarkovian",
    "schedule": {"kind": "exponential", "base": 4.0},
    "n_max": 2,
    "num_paths": 5_000,
    "num_steps": 20,
    "seed": 3,
}

UNSTABLE_GRID = {
    "problem": "bm-cos",
    "mode": "pde_markovian",
    "schedule": {"kind": "exponential", "base": 4.0},
    "n_max": 2,
    "grid": {"x_min": -6.0, "x_max": 6.0, "num_nodes": 401, "num_time_steps": 16, "theta": 0.0},
}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def write_config(workdir, payload, name="config.json"):
    path = workdir / name
    path.write_text(json.dumps(payload))
    return str(path)


def read_rows(path):
    header, *rows = path.read_text().strip().split("\n")
    return header.split(","), [row.split(",") for row in rows]


class TestExperimentConfig:
    def test_minimal_defaults(self):
        config = ExperimentConfig.from_dict(dict(MINIMAL))
        assert config.problem == "bm-lin"
        assert config.params == {}
        assert config.out == "report" and config.format == "csv"
        assert config.scheme == SchemeConfig.from_dict(
            {k: v for k, v in MINIMAL.items() if k != "problem"}
        )

    def test_dict_round_trip(self):
        config = ExperimentConfig.from_dict(
            {**MINIMAL, "params": {"kappa": 0.25}, "out": "runs/x", "format": "both"}
        )
        assert ExperimentConfig.from_dict(config.to_dict()) == config

    def test_rejections(self):
        with pytest.raises(ValidationError, match="requires 'problem'"):
            ExperimentConfig.from_dict({k: v for k, v in MINIMAL.items() if k != "problem"})
        with pytest.raises(ValidationError, match="unknown scheme config keys"):
            ExperimentConfig.from_dict({**MINIMAL, "extra": 1})
        with pytest.raises(ValidationError, match="format"):
            ExperimentConfig.from_dict({**MINIMAL, "format": "xml"})
        with pytest.raises(ValidationError, match="params"):
            ExperimentConfig.from_dict({**MINIMAL, "params": [1]})
        with pytest.raises(ValidationError, match="must be an object"):
            ExperimentConfig.from_dict("bm-lin")


class TestSolve:
    def test_minimal_run_writes_csv(self, workdir, capsys):
        code = main(["solve", "--config", write_config(workdir, MINIMAL)])
        assert code == 0
        header, rows = read_rows(workdir / "report.csv")
        assert header[0] == "n"
        assert len(rows) == MINIMAL["n_max"] + 1
        out = capsys.readouterr().out
        assert "bm-lin" in out and "ref=0.500000 (analytic)" in out

    def test_fixed_seed_is_byte_identical(self, workdir):
        config = write_config(workdir, MINIMAL)
        assert main(["solve", "--config", config, "--out", "first"]) == 0
        assert main(["solve", "--config", config, "--out", "second"]) == 0
        assert (workdir / "first.csv").read_bytes() == (workdir / "second.csv").read_bytes()

    def test_json_envelope_round_trips(self, workdir):
        config = write_config(workdir, {**MINIMAL, "format": "json"})
        assert main(["solve", "--config", config, "--seed", "7"]) == 0
        envelope = json.loads((workdir / "report.json").read_text())
        parsed = ExperimentConfig.from_dict(envelope["config"])
        assert parsed.scheme.seed == 7
        expected = ExperimentConfig.from_dict({**MINIMAL, "format": "json", "seed": 7})
        assert parsed == expected

    def test_both_formats(self, workdir):
        config = write_config(workdir, {**MINIMAL, "format": "both", "out": "ladder"})
        assert main(["solve", "--config", config]) == 0
        assert (workdir / "ladder.csv").exists() and (workdir / "ladder.json").exists()

    def test_phi_zero_invariant_is_cited(self, workdir, capsys):
        payload = {**MINIMAL, "schedule": {"kind": "custom", "values": [2.0, 4.0, 16.0]}}
        code = main(["solve", "--config", write_config(workdir, payload)])
        assert code == 2
        assert "phi(0)=1 invariant" in capsys.readouterr().err

    def test_validation_exit_codes(self, workdir, capsys):
        assert main(["solve", "--config", str(workdir / "absent.json")]) == 2
        assert "cannot read" in capsys.readouterr().err
        bad = workdir / "bad.json"
        bad.write_text("{not json")
        assert main(["solve", "--config", str(bad)]) == 2
        assert "not valid JSON" in capsys.readouterr().err
        assert main(["solve", "--config", write_config(workdir, {**MINIMAL, "spam": 1})]) == 2
        assert "unknown scheme config keys" in capsys.readouterr().err
        payload = {**MINIMAL, "problem": "bm-quad"}
        assert main(["solve", "--config", write_config(workdir, payload)]) == 2
        assert "unknown benchmark" in capsys.readouterr().err

    def test_numerical_abort_exits_3(self, workdir, capsys):
        code = main(["solve", "--config", write_config(workdir, UNSTABLE_GRID)])
        assert code == 3
        assert "partial" in capsys.readouterr().err
        envelope = (workdir / "report.csv").read_text()  # report still written
        assert envelope.startswith("n,")


class TestConverge:
    def test_faster_schedule_dominates(self, workdir):
        payload = {
            "problem": "bm-lin",
            "mode": "mc_nonmarkovian",
            "schedules": [
                {"kind": "exponential", "base": 4.0},
                {"kind": "super_exponential", "base": 4.0},
            ],
            "n_max": 3,
            "num_paths": 20_000,
            "num_steps": 50,
            "seed": 11,
            "out": "ladders",
        }
        assert main(["converge", "--config", write_config(workdir, payload)]) == 0
        header, rows = read_rows(workdir / "ladders.csv")
        assert header[0] == "schedule" and header[1] == "n"
        by_schedule = {}
        for row in rows:
            by_schedule.setdefault(row[0], []).append(row[1:])
        exp = by_schedule["exponential(4)"]
        sup = by_schedule["super_exponential(4)"]
        assert exp[0] == sup[0]  # shared noise: identical n=0 rows
        for n in (1, 2, 3):
            err_exp, se_exp = float(exp[n][3]), float(exp[n][2])
            err_sup, se_sup = float(sup[n][3]), float(sup[n][2])
            assert err_sup <= err_exp + math.hypot(se_exp, se_sup)

    def test_single_schedule_matches_solve(self, workdir):
        solo = write_config(workdir, MINIMAL, "solo.json")
        assert main(["solve", "--config", solo, "--out", "solo"]) == 0
        multi = dict(MINIMAL)
        multi["schedules"] = [multi.pop("schedule")]
        assert main(
            ["converge", "--config", write_config(workdir, multi, "multi.json"), "--out", "multi"]
        ) == 0
        solo_rows = (workdir / "solo.csv").read_text().strip().split("\n")[1:]
        multi_rows = (workdir / "multi.csv").read_text().strip().split("\n")[1:]
        assert [row.split(",", 1)[1] for row in multi_rows] == solo_rows

    def test_schedule_list_validation(self, workdir, capsys):
        payload = dict(MINIMAL)
        payload["schedules"] = []
        del payload["schedule"]
        assert main(["converge", "--config", write_config(workdir, payload)]) == 2
        assert "non-empty list" in capsys.readouterr().err
        assert main(["converge", "--config", write_config(workdir, MINIMAL)]) == 2
        assert "'schedules'" in capsys.readouterr().err


class TestCrosscheck:
    def test_agreeing_estimators_exit_0(self, workdir, capsys):
        code = main(["crosscheck", "--config", write_config(workdir, MINIMAL), "1"])
        assert code == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "gap=" in out and "combined_stderr=" in out

    def test_controlled_vol_is_rejected(self, workdir, capsys):
        payload = {
            "problem": "bm-vol",
            "params": {"kappa": 0.25},
            "mode": "mc_controlled_vol",
            "schedule": {"kind": "exponential", "base": 4.0},
            "num_paths": 2_000,
            "num_steps": 10,
        }
        assert main(["crosscheck", "--config", write_config(workdir, payload), "1"]) == 2
        assert "mc_nonmarkovian" in capsys.readouterr().err

    def test_missing_rung_argument(self, workdir, capsys):
        assert main(["crosscheck", "--config", write_config(workdir, MINIMAL)]) == 2


class TestMainPlumbing:
    def test_usage_errors_exit_2(self, capsys):
        assert main([]) == 2
        assert main(["solve"]) == 2

    def test_help_exits_0(self, capsys):
        assert main(["--help"]) == 0

    def test_list_benchmarks(self, capsys):
        assert main(["list-benchmarks"]) == 0
        out = capsys.readouterr().out
        for name in ("bm-lin", "bm-cos", "bm-vol"):
            assert name in out
        assert "kappa" in out
