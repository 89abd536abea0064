import json

import numpy as np
import pytest

from conftest import config_path
from defect_bands.cli import main

try:
    import jsonschema
except ImportError:  # pragma: no cover
    jsonschema = None

import importlib.resources


def schema(name):
    path = importlib.resources.files("defect_bands") / "schemas" / name
    return json.loads(path.read_text())


class TestValidate:
    def test_bundled_config_valid(self, capsys):
        code = main(["validate", "--config", config_path("chain_point_defect.json")])
        assert code == 0
        assert "no violations" in capsys.readouterr().out

    def test_duplicate_codim_exit_one(self, tmp_path, capsys):
        doc = json.loads(open(config_path("chain_point_defect.json")).read())
        doc["defects"].append(json.loads(json.dumps(doc["defects"][0])))
        bad = tmp_path / "dup.json"
        bad.write_text(json.dumps(doc))
        code = main(["validate", "--config", str(bad)])
        assert code == 1
        assert "duplicate codim 1" in capsys.readouterr().out

    def test_empty_file_exit_two(self, tmp_path, capsys):
        bad = tmp_path / "empty.json"
        bad.write_text("")
        code = main(["validate", "--config", str(bad)])
        assert code == 2
        assert "line" in capsys.readouterr().err

    def test_unknown_key_rejected(self, tmp_path, capsys):
        doc = json.loads(open(config_path("chain.json")).read())
        doc["unexpected"] = 1
        bad = tmp_path / "unknown.json"
        bad.write_text(json.dumps(doc))
        code = main(["validate", "--config", str(bad)])
        assert code == 2
        assert "unknown keys" in capsys.readouterr().err

    def test_config_schema_accepts_bundled(self):
        if jsonschema is None:
            pytest.skip("jsonschema unavailable")
        cfg_schema = schema("config.schema.json")
        for name in ("chain.json", "chain_point_defect.json", "square.json",
                     "square_line_defect.json", "bipartite_chain.json"):
            doc = json.loads(open(config_path(name)).read())
            jsonschema.validate(doc, cfg_schema)


class TestBands:
    def test_five_point_grid(self, tmp_path):
        out = tmp_path / "bands.csv"
        code = main(["bands", "--config", config_path("chain.json"),
                     "--k-grid", "5", "--out", str(out)])
        assert code == 0
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "k_1,band_index,omega"
        assert len(lines) == 6
        for line in lines[1:]:
            k, idx, omega = line.split(",")
            assert float(omega) == pytest.approx(2 * np.cos(float(k)), abs=1e-12)

    def test_2d_origin_band(self, tmp_path):
        out = tmp_path / "bands2.csv"
        code = main(["bands", "--config", config_path("square.json"),
                     "--k-path", "0,0", "--out", str(out)])
        assert code == 0
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "k_1,k_2,band_index,omega"
        assert lines[1].split(",")[-1] == "4.0"

    def test_bipartite_dirac_rows(self, tmp_path):
        out = tmp_path / "bands3.csv"
        code = main(["bands", "--config", config_path("bipartite_chain.json"),
                     "--k-path", f"{np.pi}", "--out", str(out)])
        assert code == 0
        lines = out.read_text().strip().split("\n")
        assert len(lines) == 3
        for line in lines[1:]:
            assert abs(float(line.split(",")[-1])) <= 1e-12


class TestMembership:
    def test_in_band(self, capsys):
        code = main(["membership", "--config", config_path("chain.json"),
                     "--omega", "1.0"])
        assert code == 0
        assert "IN (step 0)" in capsys.readouterr().out

    def test_defect_point(self, capsys):
        code = main(["membership", "--config",
                     config_path("chain_point_defect.json"),
                     "--omega", str(float(np.sqrt(5.0)))])
        assert code == 0
        assert "IN (step 1)" in capsys.readouterr().out

    def test_out_with_level_value(self, capsys):
        code = main(["membership", "--config",
                     config_path("chain_point_defect.json"),
                     "--omega", "3.0"])
        assert code == 0
        out = capsys.readouterr().out
        assert "OUT" in out
        assert "0.5527864" in out

    def test_inconclusive_exit_three(self, capsys):
        code = main(["membership", "--config",
                     config_path("chain_point_defect.json"),
                     "--omega", "2.01"])
        assert code == 3
        assert "INCONCLUSIVE" in capsys.readouterr().out

    def test_json_output_matches_schema(self, capsys):
        code = main(["membership", "--config",
                     config_path("chain_point_defect.json"),
                     "--omega", "3.0", "--json"])
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["status"] == "out"
        if jsonschema is not None:
            jsonschema.validate(doc, schema("membership.schema.json"))


class TestSpectrum:
    def test_chain_defect_rows(self, tmp_path, capsys):
        out = tmp_path / "spec.csv"
        code = main(["spectrum", "--config",
                     config_path("chain_point_defect.json"),
                     "--out", str(out), "--probes", "5"])
        assert code == 0
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "kind,codim,omega_lo,omega_hi"
        kinds = {line.split(",")[0] for line in lines[1:]}
        assert kinds == {"band_interval", "isolated_point"}
        branch = (tmp_path / "spec_branch_codim1.csv").read_text().strip().split("\n")
        assert branch[0] == "omega"
        assert float(branch[1]) == pytest.approx(np.sqrt(5.0), abs=1e-8)


class TestOracleCommand:
    def test_periodic_no_defect(self, tmp_path, capsys):
        out = tmp_path / "orc.csv"
        code = main(["oracle", "--config", config_path("chain.json"),
                     "--L", "8", "--bc", "periodic", "--out", str(out)])
        assert code == 0
        text = capsys.readouterr().out
        assert "max deviation" in text
        deviation = float(text.split("max deviation")[1].strip())
        assert deviation <= 1e-10

    def test_open_with_defect(self, tmp_path, capsys):
        out = tmp_path / "orc2.csv"
        code = main(["oracle", "--config",
                     config_path("chain_point_defect.json"),
                     "--L", "60", "--bc", "open", "--out", str(out),
                     "--tol", "1e-6"])
        assert code == 0
        text = capsys.readouterr().out
        assert "comparison ok: True" in text
        assert "matched" in text

    def test_oversize_clean_error(self, capsys):
        code = main(["oracle", "--config", config_path("square.json"),
                     "--L", "200", "--bc", "open"])
        assert code == 1
        assert "reduce L" in capsys.readouterr().err


class TestDeterminism:
    def test_thread_flag_never_changes_bytes(self, tmp_path):
        outs = []
        for threads in ("1", "8"):
            out = tmp_path / f"spec_{threads}.csv"
            code = main(["spectrum", "--config",
                         config_path("chain_point_defect.json"),
                         "--out", str(out), "--probes", "3",
                         "--threads", threads])
            assert code == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
