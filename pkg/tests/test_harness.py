import csv
import json
import os

import numpy as np
import pytest

import ddrkit.harness as harness
from ddrkit.cli import main
from ddrkit.harness import (
    ConfigError,
    FailureBudgetExceeded,
    MalformedRecords,
    ReplicationResult,
    config_from_dict,
    run_experiment,
    summarize,
)


def base_config(tmp_path, **overrides):
    raw = {
        "dgp": {"kind": "linear-linear", "p": 10},
        "n": 150,
        "replications": 2,
        "nuisance_grid": [["linear-logit", "linear"]],
        "estimators": ["ddr", "full"],
        "inference": False,
        "seed": 11,
        "output": str(tmp_path / "out"),
        "theta0_size": 20_000,
    }
    raw.update(overrides)
    return raw


class TestWorkerCount:
    def test_env_override(self, monkeypatch):
        monkeypatch.setenv("DDRKIT_THREADS", "3")
        assert harness.worker_count() == 3

    def test_env_floor_at_one(self, monkeypatch):
        monkeypatch.setenv("DDRKIT_THREADS", "0")
        assert harness.worker_count() == 1

    def test_bad_env_rejected(self, monkeypatch):
        monkeypatch.setenv("DDRKIT_THREADS", "many")
        with pytest.raises(ConfigError):
            harness.worker_count()


class TestConfig:
    def test_unknown_top_level_key_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown config key"):
            config_from_dict(base_config(tmp_path, bogus=1))

    def test_unknown_dgp_key_rejected(self, tmp_path):
        raw = base_config(tmp_path)
        raw["dgp"]["extra"] = True
        with pytest.raises(ConfigError, match="unknown dgp key"):
            config_from_dict(raw)

    def test_missing_required_key(self, tmp_path):
        raw = base_config(tmp_path)
        del raw["seed"]
        with pytest.raises(ConfigError, match="seed"):
            config_from_dict(raw)

    def test_bad_grid_cell(self, tmp_path):
        with pytest.raises(ConfigError, match="pi_spec"):
            config_from_dict(base_config(tmp_path, nuisance_grid=[["probit", "linear"]]))

    def test_bad_estimator(self, tmp_path):
        with pytest.raises(ConfigError, match="estimator"):
            config_from_dict(base_config(tmp_path, estimators=["ddr", "ridge"]))

    def test_bad_alpha(self, tmp_path):
        with pytest.raises(ConfigError, match="alpha"):
            config_from_dict(base_config(tmp_path, alpha=1.2))

    def test_empty_grid(self, tmp_path):
        with pytest.raises(ConfigError, match="nonempty"):
            config_from_dict(base_config(tmp_path, nuisance_grid=[]))


class TestRunExperiment:
    def test_single_replication_single_estimator(self, tmp_path):
        cfg = config_from_dict(
            base_config(tmp_path, replications=1, estimators=["full"])
        )
        out = run_experiment(cfg, workers=1)
        with open(os.path.join(out, "records.csv")) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == harness.RECORD_HEADER
        assert len(rows) == 2
        tables = summarize(out, figures=False)
        assert len(tables.estimation) == 1
        assert tables.estimation[0]["l2_mean"] == float(rows[1][4])
        assert tables.estimation[0]["l2_sd"] == 0.0

    def test_byte_identical_reruns(self, tmp_path):
        raw1 = base_config(tmp_path, output=str(tmp_path / "a"), inference=True)
        raw2 = base_config(tmp_path, output=str(tmp_path / "b"), inference=True)
        run_experiment(config_from_dict(raw1), workers=1)
        run_experiment(config_from_dict(raw2), workers=2)
        rec_a = open(tmp_path / "a" / "records.csv", "rb").read()
        rec_b = open(tmp_path / "b" / "records.csv", "rb").read()
        assert rec_a == rec_b
        inf_a = open(tmp_path / "a" / "inference.csv", "rb").read()
        inf_b = open(tmp_path / "b" / "inference.csv", "rb").read()
        assert inf_a == inf_b

    def test_failure_budget(self, tmp_path, monkeypatch):
        cfg = config_from_dict(base_config(tmp_path, replications=10))
        real = harness.run_replication

        def flaky(config, params, theta0, rep_id):
            if rep_id in (2, 5):
                return ReplicationResult(rep_id, error="RuntimeError: boom")
            return real(config, params, theta0, rep_id)

        monkeypatch.setattr(harness, "run_replication", flaky)
        with pytest.raises(FailureBudgetExceeded):
            run_experiment(cfg, workers=1)
        errors = open(tmp_path / "out" / "errors.csv").read()
        assert "boom" in errors

    def test_failures_within_budget_tolerated(self, tmp_path, monkeypatch):
        cfg = config_from_dict(base_config(tmp_path, replications=10))
        real = harness.run_replication

        def flaky(config, params, theta0, rep_id):
            if rep_id == 4:
                return ReplicationResult(rep_id, error="ValueError: once")
            return real(config, params, theta0, rep_id)

        monkeypatch.setattr(harness, "run_replication", flaky)
        out = run_experiment(cfg, workers=1)
        with open(os.path.join(out, "records.csv")) as fh:
            rows = list(csv.reader(fh))[1:]
        assert {int(r[0]) for r in rows} == set(range(10)) - {4}


class TestSummarize:
    def make_records(self, tmp_path, rows):
        out = tmp_path / "sums"
        out.mkdir()
        with open(out / "records.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(harness.RECORD_HEADER)
            writer.writerows(rows)
        return str(out)

    def test_mean_and_sd(self, tmp_path):
        out = self.make_records(
            tmp_path,
            [
                [0, "full", "-", "-", 0.1, 0.2, 0.0],
                [1, "full", "-", "-", 0.3, 0.4, 0.0],
            ],
        )
        tables = summarize(out, figures=False)
        row = tables.estimation[0]
        assert row["l2_mean"] == pytest.approx(0.2)
        assert row["l2_sd"] == pytest.approx(0.14142135623730953)

    def test_all_covered_gives_unit_covp(self, tmp_path):
        out = self.make_records(tmp_path, [[0, "ddr", "linear-logit", "linear", 0.1, 0.2, 0.0]])
        theta0 = [1.0, 0.0, 0.0]
        with open(os.path.join(out, "theta0.json"), "w") as fh:
            json.dump({"theta0": theta0}, fh)
        with open(os.path.join(out, "inference.csv"), "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(harness.INFERENCE_HEADER)
            for rep in (0, 1):
                for coord in range(3):
                    writer.writerow([rep, "ddr", "linear-logit", "linear", coord, 1, 0.5])
        tables = summarize(out, figures=False)
        for row in tables.inference:
            assert row["a_covp"] == 1.0
            assert row["m_covp"] == 1.0
            assert row["ci_length_mean"] == 0.5

    def test_malformed_header(self, tmp_path):
        out = tmp_path / "bad"
        out.mkdir()
        with open(out / "records.csv", "w") as fh:
            fh.write("nope,nope\n1,2\n")
        with pytest.raises(MalformedRecords):
            summarize(str(out), figures=False)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MalformedRecords):
            summarize(str(tmp_path), figures=False)

    def test_figures_rendered(self, tmp_path):
        out = self.make_records(tmp_path, [[0, "full", "-", "-", 0.1, 0.2, 0.0]])
        summarize(out, figures=True)
        assert os.path.exists(os.path.join(out, "l2_errors.png"))


class TestCli:
    def test_simulate_theta0_fit_roundtrip(self, tmp_path):
        data_path = str(tmp_path / "data.npz")
        truth_path = str(tmp_path / "truth.npz")
        rc = main([
            "simulate", "--kind", "linear-linear", "--p", "10", "--n", "200",
            "--seed", "3", "--out", data_path, "--truth", truth_path,
        ])
        assert rc == 0 and os.path.exists(data_path) and os.path.exists(truth_path)

        theta_path = str(tmp_path / "theta0.json")
        rc = main([
            "theta0", "--kind", "linear-linear", "--p", "10", "--seed", "3",
            "--size", "20000", "--out", theta_path,
        ])
        assert rc == 0
        theta0 = json.load(open(theta_path))
        assert len(theta0["theta0"]) == 11

        fit_path = str(tmp_path / "fit.json")
        rc = main([
            "fit", "--data", data_path, "--estimator", "ddr",
            "--pi", "linear-logit", "--m", "linear", "--seed", "5",
            "--out", fit_path,
        ])
        assert rc == 0
        fit = json.load(open(fit_path))
        assert len(fit["coefficients"]) == 11
        assert fit["converged"]

        rc = main([
            "fit", "--data", data_path, "--estimator", "oracle",
            "--truth", truth_path, "--seed", "5",
            "--out", str(tmp_path / "fit_oracle.json"),
        ])
        assert rc == 0

    def test_fit_full_requires_truth(self, tmp_path):
        data_path = str(tmp_path / "d.npz")
        main(["simulate", "--kind", "linear-linear", "--p", "10", "--n", "100",
              "--seed", "1", "--out", data_path])
        rc = main(["fit", "--data", data_path, "--estimator", "full",
                   "--out", str(tmp_path / "f.json")])
        assert rc == 2

    def test_run_and_summarize(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(base_config(tmp_path, replications=1)))
        rc = main(["run", "--config", str(cfg_path), "--workers", "1"])
        assert rc == 0
        out = str(tmp_path / "out")
        assert os.path.exists(os.path.join(out, "summary.txt"))
        rc = main(["summarize", "--records", out, "--no-figures"])
        assert rc == 0

    def test_bad_config_exits_2(self, tmp_path):
        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text(json.dumps({"nope": 1}))
        assert main(["run", "--config", str(cfg_path)]) == 2

    def test_missing_config_file_exits_2(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "absent.json")]) == 2
