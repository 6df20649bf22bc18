"""
End-to-end tests of the command-line runner: exit codes and artifacts
"""
import csv
import json
import math
from pathlib import Path

import pytest

from app.cli import EXIT_CHECK_FAILED, EXIT_CONFIG_ERROR, EXIT_PASS, main


def write_config(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def run(config_path, out_dir, *extra):
    return main(["run", config_path, "--out", out_dir, *extra])


def artifact(out_dir, suffix):
    matches = sorted(Path(out_dir).glob(f"*{suffix}"))
    assert len(matches) == 1, matches
    return matches[0]


def zero_driver_file(tmp_path, n=16):
    path = tmp_path / "zero.csv"
    lines = ["t,u"] + [f"{i / n!r},0.0" for i in range(n + 1)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


TRACE_CONFIG = {
    "experiment": "trace",
    "driver": {"kind": "finite_energy"},
    "grid": {"T": 1.0, "n": 64},
    "t_list": [1.0],
    "y_list": [1.0, 0.1],
    "plots": False,
}


class TestConfigErrors:
    def test_kappa_at_least_two(self, tmp_path, out_dir, capsys):
        cfg = write_config(tmp_path, {"experiment": "verify-keyest", "driver": {"kind": "brownian", "kappa": 3.0}})
        assert run(cfg, out_dir) == EXIT_CONFIG_ERROR
        assert "kappa must be < 2" in capsys.readouterr().err

    def test_malformed_json(self, tmp_path, out_dir):
        path = tmp_path / "broken.json"
        path.write_text("{not json", encoding="utf-8")
        assert run(str(path), out_dir) == EXIT_CONFIG_ERROR

    def test_missing_file(self, tmp_path, out_dir):
        assert run(str(tmp_path / "absent.json"), out_dir) == EXIT_CONFIG_ERROR

    def test_unknown_key(self, tmp_path, out_dir, capsys):
        cfg = write_config(tmp_path, {"experiment": "trace", "driver": {"kind": "finite_energy"}, "colour": "blue"})
        assert run(cfg, out_dir) == EXIT_CONFIG_ERROR
        assert "colour" in capsys.readouterr().err

    def test_no_config(self, capsys):
        assert main(["run"]) == EXIT_CONFIG_ERROR
        assert "needs a config file" in capsys.readouterr().err

    def test_off_grid_anchor(self, tmp_path, out_dir):
        cfg = write_config(tmp_path, {"experiment": "solve", "driver": {"kind": "finite_energy"},
                                      "grid": {"n": 64}, "t_list": [0.3]})
        assert run(cfg, out_dir) == EXIT_CONFIG_ERROR

    def test_spec_only_experiment_with_driver_file(self, tmp_path, out_dir):
        cfg = write_config(tmp_path, {"experiment": "gen", "driver_file": zero_driver_file(tmp_path)})
        assert run(cfg, out_dir) == EXIT_CONFIG_ERROR

    def test_cameron_martin_needs_finite_energy(self, tmp_path, out_dir, capsys):
        cfg = write_config(tmp_path, {"experiment": "verify-cm", "driver": {"kind": "brownian"}, "grid": {"n": 64}})
        assert run(cfg, out_dir) == EXIT_CONFIG_ERROR
        assert "finite-energy" in capsys.readouterr().err

    def test_no_driver(self, tmp_path, out_dir):
        cfg = write_config(tmp_path, {"experiment": "trace"})
        assert run(cfg, out_dir) == EXIT_CONFIG_ERROR

    def test_negative_seed_offset(self, tmp_path, out_dir):
        cfg = write_config(tmp_path, TRACE_CONFIG)
        assert run(cfg, out_dir, "--seed-offset", "-1") == EXIT_CONFIG_ERROR


class TestTrace:
    def test_zero_driver_trace(self, tmp_path, out_dir, capsys):
        cfg = write_config(tmp_path, TRACE_CONFIG)
        assert run(cfg, out_dir) == EXIT_PASS
        assert "trace: PASS" in capsys.readouterr().out

        with open(artifact(out_dir, ".csv"), newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 65
        for row in rows:
            t = float(row["t"])
            assert float(row["re"]) == pytest.approx(0.0, abs=1e-9)
            assert float(row["im"]) == pytest.approx(2.0 * math.sqrt(t), abs=1e-3)
            assert row["converged"] == "true"

        report = json.loads(artifact(out_dir, ".json").read_text(encoding="utf-8"))
        assert report["passed"] is True
        assert report["partial"] is False
        provenance = report["provenance"]
        assert provenance["experiment"] == "trace"
        assert provenance["config"]["trace"]["k_max"] == 20
        assert provenance["drivers"] == ["finite_energy"]
        assert artifact(out_dir, ".json").name == f"trace-{provenance['config_hash']}.json"

    def test_byte_identical_reruns(self, tmp_path):
        cfg = write_config(tmp_path, TRACE_CONFIG)
        first, second = str(tmp_path / "a"), str(tmp_path / "b")
        assert run(cfg, first) == EXIT_PASS
        assert run(cfg, second) == EXIT_PASS
        for suffix in (".csv", ".json"):
            assert artifact(first, suffix).read_bytes() == artifact(second, suffix).read_bytes()

    def test_seed_offset_changes_the_stem(self, tmp_path):
        cfg = write_config(tmp_path, TRACE_CONFIG)
        first, second = str(tmp_path / "a"), str(tmp_path / "b")
        run(cfg, first)
        run(cfg, second, "--seed-offset", "5")
        assert artifact(first, ".json").name != artifact(second, ".json").name


class TestExperiments:
    def test_cameron_martin_on_the_corpus(self, tmp_path, out_dir):
        cfg = write_config(tmp_path, {"experiment": "verify-cm", "use_corpus": True, "grid": {"n": 64},
                                      "t_list": [0.5, 1.0], "y_list": [1.0, 0.1], "plots": False})
        assert run(cfg, out_dir) == EXIT_PASS
        report = json.loads(artifact(out_dir, ".json").read_text(encoding="utf-8"))
        assert "steep_tail" in report["provenance"]["drivers"]
        assert "brownian_k1" not in report["provenance"]["drivers"]

    def test_continuity_refuses_a_rough_driver(self, tmp_path, out_dir, capsys):
        cfg = write_config(tmp_path, {"experiment": "continuity", "driver": {"kind": "brownian"},
                                      "grid": {"n": 256}, "plots": False})
        assert run(cfg, out_dir) == EXIT_CHECK_FAILED
        assert "continuity: FAIL" in capsys.readouterr().out

    def test_qv_single_path(self, tmp_path, out_dir):
        cfg = write_config(tmp_path, {"experiment": "qv", "driver": {"kind": "brownian", "seed": 3},
                                      "grid": {"n": 256}, "n_paths": 1})
        assert run(cfg, out_dir) == EXIT_PASS
        with open(artifact(out_dir, ".csv"), newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        assert [int(r["level"]) for r in rows] == [1, 2, 3, 4, 5, 6]

    def test_solve_from_a_driver_file(self, tmp_path, out_dir):
        cfg = write_config(tmp_path, {"experiment": "solve", "driver_file": zero_driver_file(tmp_path),
                                      "t_list": [0.5, 1.0], "points": [[0.0, 1.0]]})
        assert run(cfg, out_dir) == EXIT_PASS
        report = json.loads(artifact(out_dir, ".json").read_text(encoding="utf-8"))
        assert report["provenance"]["drivers"] == ["zero"]
        assert report["report"]["drivers"][0]["closed_form_error"] <= 1e-6

    def test_represent_orders_levels_over_samples(self, tmp_path, out_dir):
        cfg = write_config(tmp_path, {"experiment": "represent", "driver": {"kind": "brownian"},
                                      "grid": {"n": 1024}, "n_samples": 8, "t_list": [1.0],
                                      "points": [[0.0, 1.0]], "plots": False})
        code = run(cfg, out_dir)
        body = json.loads(artifact(out_dir, ".json").read_text(encoding="utf-8"))["report"]["drivers"][0]
        rms = body["level_rms"]
        assert len(rms) == 8
        assert body["passed"] == (rms[-1] <= rms[-2] <= rms[-3] and body["pass_fraction"] >= 0.95)
        assert code == (EXIT_PASS if body["passed"] else EXIT_CHECK_FAILED)

    def test_keyest_counts_under_resolved_reports(self, tmp_path, out_dir):
        cfg = write_config(tmp_path, {"experiment": "verify-keyest", "driver": {"kind": "brownian"},
                                      "grid": {"n": 256}, "n_samples": 2, "t_list": [1.0],
                                      "y_list": [1.0, 0.1], "plots": False})
        run(cfg, out_dir)
        body = json.loads(artifact(out_dir, ".json").read_text(encoding="utf-8"))["report"]["drivers"][0]
        # only y = 0.1 is too fine for stride 4 on 256 steps
        assert body["under_resolved"] == 2


class TestCorpusAndSchema:
    def test_corpus_is_deterministic(self, tmp_path):
        first, second = tmp_path / "a", tmp_path / "b"
        assert main(["corpus", "--out", str(first), "--n", "64"]) == EXIT_PASS
        assert main(["corpus", "--out", str(second), "--n", "64"]) == EXIT_PASS
        with open(first / "zero.csv", newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 65
        assert all(float(r["u"]) == 0.0 for r in rows)
        for path in first.iterdir():
            assert path.read_bytes() == (second / path.name).read_bytes()
        index = json.loads((first / "corpus.json").read_text(encoding="utf-8"))
        assert index["grid"] == {"T": 1.0, "n": 64}
        assert "brownian_k1" in index["entries"]

    def test_bad_grid(self, tmp_path):
        assert main(["corpus", "--out", str(tmp_path), "--n", "0"]) == EXIT_CONFIG_ERROR

    def test_schema(self, tmp_path):
        target = tmp_path / "schema.json"
        assert main(["schema", "--out", str(target)]) == EXIT_PASS
        schema = json.loads(target.read_text(encoding="utf-8"))
        assert "experiment" in schema["properties"]
        assert "experiment" in schema["required"]
