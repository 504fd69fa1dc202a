import json

import pytest
import yaml

from rwtree import cli

from conftest import SMALL_PARAMS, artifact_bytes, small_config


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


class TestCheckEnv:
    def test_lambda_biased(self, tmp_path):
        cfg = small_config("check-env", tmp_path, model={"kind": "lambda_biased", "m": 2, "lambda": 2})
        assert cli.run("check-env", cfg) == cli.EXIT_OK
        report = json.loads((tmp_path / "hypotheses.json").read_text())
        assert report["kappa"] == "inf"
        assert report["passes_Hc"] is True and report["passes_Hk"] is False

    def test_calibrated(self, tmp_path):
        assert cli.run("check-env", small_config("check-env", tmp_path)) == cli.EXIT_OK
        report = json.loads((tmp_path / "hypotheses.json").read_text())
        assert report["kappa"] == pytest.approx(1.5)


class TestExitCodes:
    @pytest.mark.parametrize("change", [
        {"model": {"kind": "calibrated", "kappa": 3.0}},
        {"model": {"kind": "mystery"}},
        {"master_seed": -1},
        {"schema_version": 2},
        {"colour": "blue"},
        {"params": {"steps": "many"}},
        {"params": {"unknown": 1}},
    ])
    def test_malformed_config(self, tmp_path, change):
        out = tmp_path / "never"
        cfg = small_config("simulate-walk", out)
        cfg.update(change)
        assert cli.run("simulate-walk", cfg) == cli.EXIT_CONFIG
        assert not out.exists()

    def test_precondition_for_infinite_kappa(self, tmp_path):
        cfg = small_config("eigen", tmp_path, model={"kind": "lambda_biased", "m": 2, "lambda": 2})
        assert cli.run("eigen", cfg) == cli.EXIT_PRECONDITION
        assert manifest(tmp_path)["exit_status"] == cli.EXIT_PRECONDITION

    def test_vertex_budget(self, tmp_path):
        cfg = small_config("simulate-walk", tmp_path)
        cfg["params"]["vertex_budget"] = 100
        cfg["params"]["steps"] = 100_000
        assert cli.run("simulate-walk", cfg) == cli.EXIT_BUDGET

    def test_unreadable_config_file(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("model: [unclosed")
        assert cli.main(["check-env", "--config", str(path), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG


class TestArtifacts:
    def test_walk_files(self, tmp_path):
        assert cli.run("simulate-walk", small_config("simulate-walk", tmp_path)) == cli.EXIT_OK
        trace = (tmp_path / "trace.csv").read_text().splitlines()
        assert len(trace) == 1 + SMALL_PARAMS["simulate-walk"]["steps"] + 1
        m = manifest(tmp_path)
        assert m["files"] == ["trace.csv", "local_times.csv"]
        assert m["exit_status"] == 0 and len(m["config_hash"]) == 64

    def test_heights_satisfy_identities(self, tmp_path):
        assert cli.run("heights", small_config("heights", tmp_path)) == cli.EXIT_OK
        rows = [line.split(",") for line in (tmp_path / "heights.csv").read_text().splitlines()
                if not line.startswith("#")][1:]
        assert rows and all(r[1] == r[2] for r in rows)
        walk = [line.split(",") for line in (tmp_path / "walk_heights.csv").read_text().splitlines()][1:]
        assert walk and all(r[1] == r[2] for r in walk)

    def test_main_with_yaml_and_environment_output(self, tmp_path, monkeypatch):
        path = tmp_path / "cfg.yaml"
        cfg = small_config("spine-sample", tmp_path / "unused")
        del cfg["output_dir"]
        path.write_text(yaml.safe_dump(cfg))
        monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "from_env"))
        assert cli.main(["spine-sample", "--config", str(path), "--seed", "3"]) == cli.EXIT_OK
        assert manifest(tmp_path / "from_env")["master_seed"] == 3


class TestConfigHash:
    def base(self, tmp_path):
        return cli.validate_config(small_config("tails", tmp_path), "tails")

    def test_stable(self, tmp_path):
        assert cli.config_hash(self.base(tmp_path)) == cli.config_hash(self.base(tmp_path))

    @pytest.mark.parametrize("path, value", [
        (("master_seed",), 8),
        (("params", "samples"), 20_001),
        (("params", "k_hill"), 50),
        (("model", "kappa"), 1.6),
        (("model", "prob_low"), 0.2),
    ])
    def test_changes_with_meaningful_fields(self, tmp_path, path, value):
        cfg = self.base(tmp_path)
        before = cli.config_hash(cfg)
        target = cfg
        for key in path[:-1]:
            target = target[key]
        target[path[-1]] = value
        assert cli.config_hash(cfg) != before

    def test_ignores_workers_and_paths(self, tmp_path):
        cfg = self.base(tmp_path)
        before = cli.config_hash(cfg)
        cfg["workers"] = 8
        cfg["output_dir"] = "/elsewhere"
        assert cli.config_hash(cfg) == before

    def test_resolved_model_is_hashed(self, tmp_path):
        # the default free parameter and its explicit value give the same model
        cfg = self.base(tmp_path)
        explicit = self.base(tmp_path)
        explicit["model"]["prob_low"] = 0.1
        assert cli.config_hash(cfg) == cli.config_hash(explicit)


@pytest.mark.parametrize("command", ["simulate-walk", "reduce", "spine-sample", "eigen"])
def test_rerun_and_worker_count_are_byte_identical(tmp_path, command):
    runs = []
    for label, workers in (("a", 1), ("b", 1), ("c", 8)):
        out = tmp_path / label
        status = cli.run(command, small_config(command, out, workers=workers))
        assert status == cli.EXIT_OK
        runs.append(artifact_bytes(out))
    assert runs[0] == runs[1] == runs[2]
