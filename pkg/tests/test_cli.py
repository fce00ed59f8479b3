r"""End-to-end tests of the liouville command line."""
import json
from pathlib import Path

import numpy as np
import pytest

from backend.app import crud, serialization
from backend.app.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run(command, config, out, *extra):
    return main([command, "--config", str(config), "--out", str(out), *extra])


@pytest.fixture
def small_config(write_config, small_pia_config):
    return write_config(small_pia_config)


@pytest.fixture
def dataset(small_config, tmp_path):
    out = tmp_path / "data"
    assert run("simulate", small_config, out) == 0
    return out


class TestConfigErrors:
    """Bad configs exit with code 2 before writing anything."""

    def test_malformed_json(self, write_config, tmp_path):
        config = write_config('{"device": {"kind": "pia",')
        assert run("simulate", config, tmp_path / "run") == 2
        assert not (tmp_path / "run").exists()

    def test_missing_block_is_named(self, write_config, small_pia_config, tmp_path, caplog):
        data = {key: value for key, value in small_pia_config.items() if key != "twin_beam"}
        assert run("simulate", write_config(data), tmp_path / "run") == 2
        assert "twin_beam" in caplog.text
        assert not (tmp_path / "run").exists()

    def test_unknown_key(self, write_config, small_pia_config, tmp_path, caplog):
        data = {**small_pia_config, "samples": 10}
        assert run("theory", write_config(data), tmp_path / "run") == 2
        assert "samples" in caplog.text

    def test_dimension_budget(self, write_config, small_pia_config, tmp_path):
        data = {**small_pia_config, "device": {**small_pia_config["device"], "dim": 10}}
        assert run("simulate", write_config(data), tmp_path / "run") == 2

    def test_missing_file(self, tmp_path):
        assert run("theory", tmp_path / "absent.json", tmp_path / "run") == 2

    def test_desk_scale_cap(self, write_config, small_pia_config, tmp_path):
        data = json.loads(json.dumps(small_pia_config))
        data["homodyne"]["samples_per_state"] = 2_000_000
        assert run("simulate", write_config(data), tmp_path / "run") == 2


class TestTheory:
    """``liouville theory``."""

    def test_writes_hashed_matrices(self, small_config, tmp_path):
        out = tmp_path / "theory"
        assert run("theory", small_config, out) == 0
        first_line = (out / "G_theory.csv").read_text().splitlines()[0]
        assert first_line.startswith("# config_hash=")
        assert len(first_line.split("=", 1)[1]) == 64

        l, sigma = serialization.read_matrix_csv(out / "L_theory.csv")
        assert sigma is None
        assert l.shape == (20, 20)
        rows, cols = np.indices(l.shape)
        assert np.all(l[np.abs(rows - cols) > 1] == 0.0)
        assert l[1, 0] == pytest.approx(0.388)

    def test_hash_ignores_output_dir_and_workers(self, small_config, tmp_path):
        assert run("theory", small_config, tmp_path / "a") == 0
        assert run("theory", small_config, tmp_path / "b", "--workers", "2") == 0
        first = (tmp_path / "a" / "G_theory.csv").read_text()
        assert first == (tmp_path / "b" / "G_theory.csv").read_text()

    def test_seed_changes_hash(self, small_config, tmp_path):
        assert run("theory", small_config, tmp_path / "a") == 0
        assert run("theory", small_config, tmp_path / "b", "--seed", "8") == 0
        first = (tmp_path / "a" / "G_theory.csv").read_text().splitlines()[0]
        assert first != (tmp_path / "b" / "G_theory.csv").read_text().splitlines()[0]


class TestSimulate:
    """``liouville simulate``."""

    def test_one_file_per_retained_outcome(self, write_config, tmp_path):
        data = json.loads((CONFIGS / "fig2a.json").read_text())
        data["homodyne"]["samples_per_state"] = 400
        data["workers"] = 1
        out = tmp_path / "fig2a"
        assert run("simulate", write_config(data), out) == 0
        names = sorted(path.name for path in out.glob("outcome_*.json"))
        assert names == [f"outcome_{n:03d}.json" for n in range(22)]
        record = json.loads((out / "outcome_000.json").read_text())
        assert record["counts"] == 400
        assert len(record["r"]) == len(record["sigma"]) == 12

    def test_repeat_runs_are_identical(self, small_config, tmp_path):
        assert run("simulate", small_config, tmp_path / "a") == 0
        assert run("simulate", small_config, tmp_path / "b", "--workers", "2") == 0
        for path in sorted((tmp_path / "a").glob("outcome_*.json")):
            assert path.read_text() == (tmp_path / "b" / path.name).read_text()

    def test_raw_quadratures(self, small_config, tmp_path):
        out = tmp_path / "raw"
        assert run("simulate", small_config, out, "--raw") == 0
        lines = (out / "quadratures.csv").read_text().splitlines()
        assert lines[0].startswith("# config_hash=")
        assert lines[1] == "outcome_n,block,x"
        assert len(lines) == 2 + 9 * 20000


class TestReconstruct:
    """``liouville reconstruct`` and ``liouville compare``."""

    def test_writes_report_and_matrices(self, small_config, dataset, tmp_path):
        out = tmp_path / "recon"
        assert run("reconstruct", small_config, out, "--data", str(dataset)) == 0
        for name in ("report.json", "L_hat.csv", "G_hat.csv", "z.csv", "L_theory.csv"):
            assert (out / name).is_file()
        report = json.loads((out / "report.json").read_text())
        assert report["size"] == 4
        assert report["block"] == report["log_size"] - report["guard"]
        assert 1 <= report["block"] <= 3
        assert report["converged_columns"] == 4
        assert report["finite_difference_bias"] is None
        record = json.loads((dataset / "outcome_000.json").read_text())
        assert len(record["blocks"]) == 4
        assert report["device_kind"] == "pia"
        assert "workers" not in report["config"]
        assert report["config_hash"] == json.loads((dataset / "outcome_000.json").read_text())["config_hash"]

    def test_missing_outcome_exits_3(self, small_config, dataset, tmp_path, caplog):
        (dataset / "outcome_003.json").unlink()
        assert run("reconstruct", small_config, tmp_path / "recon", "--data", str(dataset)) == 3
        assert "[3]" in caplog.text

    def test_empty_dataset_exits_3(self, small_config, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert run("reconstruct", small_config, tmp_path / "recon", "--data", str(empty)) == 3

    def test_branch_failure_without_fallback_exits_4(self, write_config, tmp_path):
        serialization.write_matrix_csv(tmp_path / "identity.csv", np.eye(2))
        data = {
            "device": {"kind": "green_csv", "path": str(tmp_path / "identity.csv"), "tau": 1.0, "dim": 2},
            "twin_beam": {"kappa2": 0.25, "eta_d": 1.0, "n_outcome_max": 0},
            "homodyne": {"eta_h": 0.9, "k_max": 1, "samples_per_state": 100},
            "reconstruction": {"guard": 0, "allow_fallback": False},
        }
        swapped = tmp_path / "swapped"
        swapped.mkdir()
        for n, r in enumerate(([0.0, 1.0], [1.0, 0.0])):
            record = {"n": n, "counts": 100, "r": r, "sigma": [0.0, 0.0]}
            serialization.write_json(swapped / f"outcome_{n:03d}.json", record)
        out = tmp_path / "recon"
        assert run("reconstruct", write_config(data), out, "--data", str(swapped)) == 4

    def test_compare_writes_summary(self, small_config, dataset, tmp_path, capsys):
        out = tmp_path / "recon"
        assert run("reconstruct", small_config, out, "--data", str(dataset)) == 0
        assert main(["compare", "--report", str(out / "report.json")]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert 0.0 <= summary["fraction_within_3sigma"] <= 1.0
        block = summary["block"]
        assert summary["chi2_dof"] == block * block - (3 * block - 2)
        assert summary["biased"] is False
        assert "fraction |z| <= 3" in capsys.readouterr().out

    def test_compare_flags_finite_difference(self, write_config, small_pia_config, dataset, tmp_path):
        data = json.loads(json.dumps(small_pia_config))
        data["reconstruction"]["method"] = "finite_difference"
        out = tmp_path / "recon"
        assert run("reconstruct", write_config(data, "fd.json"), out, "--data", str(dataset)) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["method_used"] == "finite_difference"
        assert report["finite_difference_bias"] > 0
        assert report["comparison"]["biased"] is True
        assert main(["compare", "--report", str(out / "report.json")]) == 0
        assert json.loads((out / "summary.json").read_text())["biased"] is True

    def test_compare_against_theory_file(self, small_config, dataset, tmp_path):
        out = tmp_path / "recon"
        assert run("reconstruct", small_config, out, "--data", str(dataset)) == 0
        args = ["compare", "--report", str(out / "report.json"), "--theory", str(out / "L_theory.csv"),
                "--out", str(tmp_path / "cmp")]
        assert main(args) == 0
        from_file = json.loads((tmp_path / "cmp" / "summary.json").read_text())
        main(["compare", "--report", str(out / "report.json")])
        embedded = json.loads((out / "summary.json").read_text())
        assert from_file["rmse"] == embedded["rmse"]

    def test_record_in_registry(self, small_config, dataset, tmp_path, monkeypatch,
                                registry_engine, registry_session, capsys):
        monkeypatch.setattr("backend.app.database.SessionLocal", registry_session)
        monkeypatch.setattr("backend.app.init_db.engine", registry_engine)
        out = tmp_path / "recon"
        assert run("reconstruct", small_config, out, "--data", str(dataset), "--record") == 0
        assert "recorded run 1" in capsys.readouterr().out
        with registry_session() as db:
            runs = crud.get_runs(db)
        assert len(runs) == 1
        report = json.loads((out / "report.json").read_text())
        assert runs[0].config_hash == report["config_hash"]
        assert runs[0].block_size == report["block"]
        assert runs[0].report_path == str((out / "report.json").resolve())


class TestPatterns:
    """``liouville patterns``."""

    def test_table_and_checks(self, tmp_path, capsys):
        assert main(["patterns", "--n-max", "3", "--points", "21", "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "patterns.csv").read_text().splitlines()
        assert lines[0] == "x,f0,f1,f2,f3"
        assert len(lines) == 22
        middle = [float(v) for v in lines[11].split(",")]
        assert middle[0] == pytest.approx(0.0, abs=1e-15)
        assert middle[1] == pytest.approx(2.0)
        text = capsys.readouterr().out
        assert "biorthogonality" in text
        assert "vacuum check" in text

    def test_bad_arguments(self, tmp_path):
        assert main(["patterns", "--points", "1", "--out", str(tmp_path)]) == 2
