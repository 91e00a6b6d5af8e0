"""CLI subcommands, exit codes, and seed resolution."""

import json

import pytest

from mlcil.cli import main


def write_config(tmp_path, name="exp.json", **overrides):
    payload = {
        "dataset": {"num_classes": 6, "feature_dim": 8, "grid_h": 3, "grid_w": 3,
                    "samples_per_session": 24, "noise_std": 0.3, "occupancy": 1,
                    "test_fraction": 0.25, "seed": 0, "base_rate": 0.3},
        "protocol": {"base_classes": 2, "increment": 2},
        "train": {"epochs": 2, "batch_size": 8, "blocks": 1, "heads": 2},
        "out": {"dir": str(tmp_path / "run")},
        "seed": 0,
    }
    for section, value in overrides.items():
        if isinstance(value, dict):
            payload.setdefault(section, {}).update(value)
        else:
            payload[section] = value
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def run_config_echo(tmp_path):
    return json.loads((tmp_path / "run" / "results.json").read_text())["config"]


class TestUsageErrors:
    def test_missing_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_run_requires_config(self):
        with pytest.raises(SystemExit) as exc:
            main(["run"])
        assert exc.value.code == 2

    def test_report_rejects_unknown_format(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["report", "--in", str(tmp_path), "--format", "xml"])
        assert exc.value.code == 2


class TestRunCommand:
    def test_happy_path_prints_summary(self, tmp_path, capsys):
        code = main(["run", "--config", write_config(tmp_path)])
        assert code == 0
        summary = json.loads(capsys.readouterr().out)
        assert set(summary) == {"avg_acc", "last_acc", "out_dir"}
        assert (tmp_path / "run" / "results.json").is_file()

    def test_missing_config_file(self, tmp_path, capsys):
        code = main(["run", "--config", str(tmp_path / "absent.json")])
        assert code == 1
        assert capsys.readouterr().err.startswith("error:")

    def test_out_flag_overrides_config(self, tmp_path, capsys):
        code = main(["run", "--config", write_config(tmp_path),
                     "--out", str(tmp_path / "elsewhere")])
        assert code == 0
        assert (tmp_path / "elsewhere" / "results.json").is_file()
        assert not (tmp_path / "run").exists()

    def test_env_seed_overrides_config(self, tmp_path, monkeypatch):
        monkeypatch.setenv("HCP_SEED", "5")
        assert main(["run", "--config", write_config(tmp_path)]) == 0
        assert run_config_echo(tmp_path)["seed"] == 5

    def test_flag_seed_overrides_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("HCP_SEED", "5")
        assert main(["run", "--config", write_config(tmp_path), "--seed", "7"]) == 0
        assert run_config_echo(tmp_path)["seed"] == 7

    def test_config_seed_used_without_flag_or_env(self, tmp_path, monkeypatch):
        monkeypatch.delenv("HCP_SEED", raising=False)
        assert main(["run", "--config", write_config(tmp_path, seed=3)]) == 0
        assert run_config_echo(tmp_path)["seed"] == 3

    def test_non_integer_env_seed(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("HCP_SEED", "abc")
        code = main(["run", "--config", write_config(tmp_path)])
        assert code == 1
        assert "HCP_SEED" in capsys.readouterr().err


class TestEvalAndReport:
    @pytest.fixture()
    def finished_run(self, tmp_path, capsys):
        dataset_path = tmp_path / "dataset.json"
        main(["run", "--config", write_config(tmp_path),
              "--export-dataset", str(dataset_path)])
        capsys.readouterr()  # drop the run summary
        return tmp_path / "run", dataset_path

    def test_eval_checkpoint_on_exported_dataset(self, finished_run, capsys):
        out, dataset_path = finished_run
        code = main(["eval",
                     "--checkpoint", str(out / "checkpoints" / "session_3.json"),
                     "--dataset", str(dataset_path)])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert 0.0 <= payload["map"] <= 1.0
        assert payload["num_samples"] > 0
        assert len(payload["per_class_ap"]) == 6

    def test_report_formats(self, finished_run, capsys):
        out, _ = finished_run
        assert main(["report", "--in", str(out)]) == 0
        assert "| session |" in capsys.readouterr().out
        assert main(["report", "--in", str(out), "--format", "csv"]) == 0
        assert capsys.readouterr().out.startswith("session,")
        assert main(["report", "--in", str(out), "--format", "json"]) == 0
        assert "sessions" in json.loads(capsys.readouterr().out)

    def test_report_on_missing_directory(self, tmp_path, capsys):
        code = main(["report", "--in", str(tmp_path / "nowhere")])
        assert code == 1
        assert capsys.readouterr().err.startswith("error:")


class TestGradcheckCommand:
    def test_reports_ok_within_tolerance(self, capsys):
        code = main(["gradcheck", "--blocks", "1"])
        assert code == 0
        out = capsys.readouterr().out
        assert "max relative gradient error" in out
        assert "OK" in out

    def test_impossible_tolerance_fails(self, capsys):
        code = main(["gradcheck", "--blocks", "1", "--tol", "1e-18"])
        assert code == 1
        assert "FAIL" in capsys.readouterr().out


class TestAblateCommand:
    def test_grid_summary_on_stdout(self, tmp_path, capsys):
        config = write_config(tmp_path, train={"epochs": 1})
        code = main(["ablate", "--config", config, "--seeds", "2",
                     "--out", str(tmp_path / "grid")])
        assert code == 0
        means = json.loads(capsys.readouterr().out)
        assert set(means) == {"ft", "fp", "fp_re", "fp_pu", "fp_re_pu"}
        assert (tmp_path / "grid" / "ablation_summary.json").is_file()

    def test_malformed_seed_list(self, tmp_path, capsys):
        config = write_config(tmp_path)
        assert main(["ablate", "--config", config, "--seeds", "x"]) == 1
        assert "seeds" in capsys.readouterr().err
