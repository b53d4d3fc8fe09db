"""Recipe-driven command line: builds, reports, determinism and error locations."""

import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from shellgrav import cli

RECIPES = Path(__file__).resolve().parent.parent / "recipes"


def run(*argv):
    return cli.main([str(a) for a in argv])


def load_report(out):
    return json.loads((Path(out) / "report.json").read_text())


class TestVerify:
    def test_flat_metric_passes(self, tmp_path, capsys):
        assert run("verify", "--recipe", RECIPES / "flat.yaml", "--out", tmp_path) == 0
        rep = load_report(tmp_path)
        assert rep["pass"] and rep["dimension"] == 4 and rep["points"] == 64
        labels = [c["label"] for c in rep["checks"]]
        assert len(labels) == len(set(labels))
        assert any(label.startswith("sourc1:") for label in labels)
        assert any(label.startswith("dtors:") for label in labels)
        assert "PASS flat" in capsys.readouterr().out

    def test_perturbed_coefficient_fails_and_is_located(self, tmp_path, capsys):
        assert run("verify", "--recipe", RECIPES / "perturbed.yaml", "--out", tmp_path) == 1
        rep = load_report(tmp_path)
        failing = {c["label"]: c for c in rep["checks"] if not c["pass"]}
        assert "sourc1:R3_3" in failing
        assert set(failing["sourc1:R3_3"]["worst_point"]) == {"x1", "x2", "y3", "y4"}
        assert "FAIL sourc1:R3_3" in capsys.readouterr().out

    def test_tolerance_override(self, tmp_path):
        assert run("verify", "--recipe", RECIPES / "perturbed.yaml", "--out", tmp_path, "--tol", "1e-1") == 0

    def test_statistics_fields(self, tmp_path):
        run("verify", "--recipe", RECIPES / "flat.yaml", "--out", tmp_path)
        check = load_report(tmp_path)["checks"][0]
        assert {"max", "mean", "quantiles", "points", "tol", "pass"} <= set(check)
        q = check["quantiles"]
        assert q["q50"] <= q["q90"] <= q["q99"] <= check["max"]


class TestBuild:
    @pytest.mark.parametrize("name", ["afdm_4d", "afdm_6d", "lc_extract", "vacuum_v2"])
    def test_recipes_pass(self, name, tmp_path):
        assert run("build", "--recipe", RECIPES / f"{name}.yaml", "--out", tmp_path) == 0
        assert (tmp_path / "fields.csv").exists() and (tmp_path / "residuals.csv").exists()

    def test_deterministic_report(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            run("build", "--recipe", RECIPES / "afdm_4d.yaml", "--out", out, "--seed", 3)
        assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
        assert (a / "residuals.csv").read_bytes() == (b / "residuals.csv").read_bytes()

    def test_threads_do_not_change_results(self, tmp_path):
        run("build", "--recipe", RECIPES / "afdm_4d.yaml", "--out", tmp_path / "one")
        run("build", "--recipe", RECIPES / "afdm_4d.yaml", "--out", tmp_path / "four", "--threads", 4)
        assert (tmp_path / "one" / "report.json").read_bytes() == (tmp_path / "four" / "report.json").read_bytes()

    def test_table_columns(self, tmp_path):
        run("build", "--recipe", RECIPES / "afdm_4d.yaml", "--out", tmp_path, "--grid", "3x3x3")
        with (tmp_path / "residuals.csv").open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["x1", "x2", "y3", "y4", "equation", "residual"]
        assert len(rows) > 27
        assert load_report(tmp_path)["points"] == 27

    def test_seed_recorded(self, tmp_path):
        run("build", "--recipe", RECIPES / "afdm_4d.yaml", "--out", tmp_path, "--seed", 11)
        prov = load_report(tmp_path)["provenance"]
        assert prov["seed"] == 11 and len(prov["recipe_sha256"]) == 64


class TestKerr:
    def test_prime_without_recipe(self, tmp_path, capsys):
        assert run("kerr", "--m0", 2, "--a", 0.5, "--out", tmp_path) == 0
        rep = load_report(tmp_path)
        assert rep["name"] == "kerr-prime-m2-a0.5"
        assert all(c["label"].startswith("dkerr:") for c in rep["checks"])

    @pytest.mark.parametrize("name", ["kerr_prime", "kerr_soliton", "kerr_epsilon"])
    def test_recipes_pass(self, name, tmp_path):
        assert run("kerr", "--recipe", RECIPES / f"{name}.yaml", "--out", tmp_path) == 0

    def test_epsilon_order_check(self, tmp_path):
        run("kerr", "--recipe", RECIPES / "kerr_epsilon.yaml", "--out", tmp_path)
        checks = {c["label"]: c for c in load_report(tmp_path)["checks"]}
        assert "nvlcmgse:order" in checks and checks["nvlcmgse:order"]["pass"]

    def test_non_kerr_recipe_rejected(self, tmp_path, capsys):
        assert run("kerr", "--recipe", RECIPES / "flat.yaml", "--out", tmp_path) == 2
        assert "kerr-deform" in capsys.readouterr().err

    def test_over_spinning_rejected(self, tmp_path):
        assert run("kerr", "--m0", 1, "--a", 1.2, "--out", tmp_path) == 2


class TestExplainAndReport:
    def test_explain_known_label(self, capsys):
        assert run("explain", "equ2") == 0
        out = capsys.readouterr().out
        assert "(equ2)" in out and "shellgrav.connection.ricci_components_ansatz" in out

    def test_explain_unknown_label(self, capsys):
        assert run("explain", "zz9") == 2
        assert "zz9" in capsys.readouterr().err

    def test_every_label_resolves(self):
        for key, (_, owner) in cli.COVERAGE.items():
            module, name = owner.split(".")
            mod = __import__(f"shellgrav.{module}", fromlist=[name])
            assert hasattr(mod, name), key
            assert cli.explain(f"({key})").startswith(f"({key})")

    def test_list(self, capsys):
        assert run("explain", "--list") == 0
        assert len(capsys.readouterr().out.splitlines()) == len(cli.COVERAGE)

    def test_report_mirrors_verdict(self, tmp_path):
        run("verify", "--recipe", RECIPES / "flat.yaml", "--out", tmp_path / "ok")
        run("verify", "--recipe", RECIPES / "perturbed.yaml", "--out", tmp_path / "bad")
        assert run("report", tmp_path / "ok") == 0
        assert run("report", tmp_path / "bad" / "report.json") == 1


class TestRecipeErrors:
    def test_yaml_syntax_error_location(self):
        with pytest.raises(cli.RecipeError) as err:
            cli.Recipe.from_text("kind: verify-only\nmetric: {g: [1, 1]\n")
        assert err.value.line == 3

    def test_bad_expression_location(self, tmp_path):
        text = "kind: verify-only\nmetric:\n  g: [1, 1]\n  h: [[\"-1\", \"1 + qq\"]]\n"
        with pytest.raises(cli.RecipeError) as err:
            cli.run_recipe(cli.Recipe.from_text(text))
        assert (err.value.line, err.value.col) == (4, 19)

    def test_unknown_kind(self):
        with pytest.raises(cli.RecipeError, match="kind"):
            cli.Recipe.from_text("kind: teleport\n")

    def test_missing_file_exit_code(self, tmp_path, capsys):
        assert run("verify", "--recipe", tmp_path / "absent.yaml") == 2

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "shellgrav", "explain", "solha"], capture_output=True, text=True)
        assert proc.returncode == 0 and "gen_h_pair" in proc.stdout
