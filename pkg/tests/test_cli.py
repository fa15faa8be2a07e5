"""CLI contract tests: config validation, exit codes, CSV byte formats."""

import json
import os

import numpy as np
import pytest

from banditcontrol.checks import REQUIRED_MODULES, registered_suites, verify_registry
from banditcontrol.cli import (
    ConfigError,
    SWEEP_HEADER,
    TRACE_HEADER,
    config_hash,
    emit_csv,
    main,
    parse_trace_csv,
    validate_config,
)

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")


def write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


def tiny_bcom_doc(**overrides):
    doc = {
        "schema_version": 1,
        "mode": "bcom",
        "seed": 0,
        "horizon": 64,
        "instance": {"d": 2, "m": 2},
        "algorithm": {"c_eta": 1.0},
    }
    doc.update(overrides)
    return doc


def tiny_control_doc(**overrides):
    doc = {
        "schema_version": 1,
        "mode": "control",
        "seed": 0,
        "horizon": 48,
        "instance": {"d_x": 2, "d_u": 1, "d_y": 1, "gamma": 0.5},
    }
    doc.update(overrides)
    return doc


class TestValidation:
    def test_negative_gamma_names_the_field(self):
        doc = tiny_control_doc()
        doc["instance"]["gamma"] = -0.3
        with pytest.raises(ConfigError, match=r"instance\.gamma"):
            validate_config(doc)

    def test_missing_required_field(self):
        with pytest.raises(ConfigError, match="schema_version"):
            validate_config({"mode": "check"})

    def test_wrong_schema_version(self):
        with pytest.raises(ConfigError, match="schema_version"):
            validate_config({"schema_version": 2, "mode": "check"})

    def test_unknown_field_rejected(self):
        doc = tiny_bcom_doc()
        doc["instance"]["mystery"] = 1
        with pytest.raises(ConfigError, match=r"instance\.mystery"):
            validate_config(doc)

    def test_type_errors_name_the_path(self):
        doc = tiny_bcom_doc(horizon="long")
        with pytest.raises(ConfigError, match="horizon: expected an integer"):
            validate_config(doc)

    def test_eta_and_c_eta_conflict(self):
        doc = tiny_bcom_doc(algorithm={"eta": 0.1, "c_eta": 1.0})
        with pytest.raises(ConfigError, match=r"algorithm\.eta"):
            validate_config(doc)

    def test_default_c_eta_applied(self):
        cfg = validate_config(tiny_bcom_doc(algorithm={}))
        assert cfg["algorithm"]["c_eta"] == 1.0
        assert cfg["algorithm"]["eta"] is None

    def test_sweep_grid_must_increase(self):
        doc = {
            "schema_version": 1, "mode": "sweep", "family": "bcom",
            "t_grid": [64, 64, 128, 192], "seeds": 5,
        }
        with pytest.raises(ConfigError, match=r"t_grid\[1\]"):
            validate_config(doc)

    def test_control_sweep_rejects_both_arms(self):
        doc = {
            "schema_version": 1, "mode": "sweep", "family": "control",
            "t_grid": [64, 96, 128, 192], "seeds": 5, "arm": "both",
        }
        with pytest.raises(ConfigError, match="newton"):
            validate_config(doc)

    def test_family_kwargs_allow_list(self):
        doc = {
            "schema_version": 1, "mode": "sweep", "family": "bcom",
            "t_grid": [64, 96, 128, 192], "seeds": 5,
            "family_kwargs": {"kappa_sys": 2.0},
        }
        with pytest.raises(ConfigError, match=r"family_kwargs\.kappa_sys"):
            validate_config(doc)

    def test_sweep_kind_enums_checked_at_parse(self):
        doc = {
            "schema_version": 1, "mode": "sweep", "family": "bcom",
            "t_grid": [64, 96, 128, 192], "seeds": 5,
            "family_kwargs": {"d": 2, "m": 2, "base_kind": "nope"},
        }
        with pytest.raises(ConfigError, match=r"family_kwargs\.base_kind"):
            validate_config(doc)

    def test_bcom_sweep_requires_instance_dims(self):
        doc = {
            "schema_version": 1, "mode": "sweep", "family": "bcom",
            "t_grid": [64, 96, 128, 192], "seeds": 5,
            "family_kwargs": {"m": 2},
        }
        with pytest.raises(ConfigError, match=r"family_kwargs\.d"):
            validate_config(doc)

    def test_cost_band_validated(self):
        doc = tiny_control_doc(cost={"alpha": 1.5})
        with pytest.raises(ConfigError, match=r"cost\.alpha"):
            validate_config(doc)


class TestConfigHash:
    def test_key_order_invariant(self):
        a = {"mode": "check", "schema_version": 1, "seed": 3}
        b = {"seed": 3, "schema_version": 1, "mode": "check"}
        assert config_hash(a) == config_hash(b)

    def test_value_sensitivity(self):
        a = {"mode": "check", "schema_version": 1, "seed": 3}
        b = dict(a, seed=4)
        assert config_hash(a) != config_hash(b)


class TestEmitCsv:
    def test_empty_trace_is_header_only(self, tmp_path):
        path = emit_csv({"kind": "trace", "rows": []}, str(tmp_path / "t.csv"))
        assert open(path, "rb").read() == (TRACE_HEADER + "\n").encode()

    def test_single_row_exact_bytes(self, tmp_path):
        row = {"t": 1, "loss": 1.0 / 3.0, "comparator_loss": 0.125,
               "cum_regret": 0.125, "updated": True, "logdet_A": -0.5}
        path = emit_csv({"kind": "trace", "rows": [row]}, str(tmp_path / "t.csv"))
        expected = (
            TRACE_HEADER + "\n"
            "1,0.33333333333333331,0.125,0.125,1,-0.5\n"
        ).encode("utf-8")
        assert open(path, "rb").read() == expected

    def test_sweep_row_exact_bytes(self, tmp_path):
        row = {"T": 64, "seed": 3, "final_regret": 2.5, "arm": "newton"}
        path = emit_csv({"kind": "sweep", "rows": [row]}, str(tmp_path / "s.csv"))
        expected = (SWEEP_HEADER + "\n64,3,2.5,newton\n").encode("utf-8")
        assert open(path, "rb").read() == expected

    def test_round_trip_recomputes_cum_regret(self, tmp_path):
        rng = np.random.default_rng(5)
        loss = rng.uniform(0, 2, size=40)
        comp = rng.uniform(0, 2, size=40)
        cum = np.cumsum(loss - comp)
        rows = [
            {"t": t + 1, "loss": loss[t], "comparator_loss": comp[t],
             "cum_regret": cum[t], "updated": t % 3 == 0, "logdet_A": 0.1 * t}
            for t in range(40)
        ]
        path = emit_csv({"kind": "trace", "rows": rows}, str(tmp_path / "t.csv"))
        cols = parse_trace_csv(path)
        recomputed = np.cumsum(cols["loss"] - cols["comparator_loss"])
        assert np.max(np.abs(recomputed - cols["cum_regret"])) <= 1e-9

    def test_timestamp_line_is_comment(self, tmp_path):
        path = emit_csv({"kind": "trace", "rows": []}, str(tmp_path / "t.csv"),
                        timestamp=True)
        lines = open(path, encoding="utf-8").read().splitlines()
        assert lines[0].startswith("# generated ")
        assert lines[1] == TRACE_HEADER
        parse_trace_csv(path)  # comments must not break re-ingestion


class TestCheckRegistry:
    def test_required_modules_all_covered(self):
        verify_registry()
        covered = {module for module, _ in registered_suites()}
        assert set(REQUIRED_MODULES) <= covered

    def test_shipped_check_config_exits_zero(self, capsys):
        code = main(["check", "--config",
                     os.path.join(CONFIG_DIR, "check.json")])
        out = capsys.readouterr().out
        assert code == 0
        assert "suites passed" in out
        for module, name in registered_suites():
            assert f"{module}.{name}" in out


class TestMainExitCodes:
    def test_malformed_config_exits_two(self, tmp_path, capsys):
        doc = tiny_control_doc()
        doc["instance"]["gamma"] = -0.3
        code = main(["control", "run", "--config", write_config(tmp_path, doc),
                     "--out", str(tmp_path / "out")])
        err = capsys.readouterr().err
        assert code == 2
        assert "instance.gamma" in err

    def test_invalid_json_exits_two(self, tmp_path, capsys):
        path = tmp_path / "broken.json"
        path.write_text("{not json", encoding="utf-8")
        code = main(["check", "--config", str(path)])
        assert code == 2
        assert "valid JSON" in capsys.readouterr().err

    def test_missing_config_exits_two(self, tmp_path, capsys):
        code = main(["check", "--config", str(tmp_path / "absent.json")])
        assert code == 2

    def test_mode_subcommand_mismatch_exits_two(self, tmp_path, capsys):
        code = main(["bcom", "run", "--config",
                     write_config(tmp_path, tiny_control_doc()),
                     "--out", str(tmp_path / "out")])
        assert code == 2
        assert "mode" in capsys.readouterr().err

    def test_unknown_subcommand_exits_two(self, capsys):
        assert main(["frobnicate", "--config", "x.json"]) == 2

    def test_unwritable_out_exits_three(self, tmp_path, capsys):
        blocker = tmp_path / "blocker"
        blocker.write_text("", encoding="utf-8")
        code = main(["bcom", "run",
                     "--config", write_config(tmp_path, tiny_bcom_doc()),
                     "--out", str(blocker / "nested")])
        assert code == 3
        assert "runtime error" in capsys.readouterr().err


class TestRunArtifacts:
    def test_bcom_run_writes_consistent_trace(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, tiny_bcom_doc())
        out = tmp_path / "out"
        assert main(["bcom", "run", "--config", cfg_path,
                     "--out", str(out)]) == 0
        cols = parse_trace_csv(str(out / "trace.csv"))
        assert len(cols["t"]) == 64
        recomputed = np.cumsum(cols["loss"] - cols["comparator_loss"])
        assert np.max(np.abs(recomputed - cols["cum_regret"])) <= 1e-9
        assert set(np.unique(cols["updated"])) <= {0.0, 1.0}
        summary = json.loads((out / "summary.json").read_text())
        assert summary["mode"] == "bcom"
        assert summary["diagnostics"]["ok"] is True
        assert summary["final_regret"] == pytest.approx(
            float(cols["cum_regret"][-1])
        )

    def test_bcom_rerun_byte_identical(self, tmp_path):
        cfg_path = write_config(tmp_path, tiny_bcom_doc())
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["bcom", "run", "--config", cfg_path, "--out", str(out1)]) == 0
        assert main(["bcom", "run", "--config", cfg_path, "--out", str(out2)]) == 0
        assert (out1 / "trace.csv").read_bytes() == (out2 / "trace.csv").read_bytes()
        assert (out1 / "summary.json").read_bytes() == \
            (out2 / "summary.json").read_bytes()

    def test_control_run_summary_flags(self, tmp_path):
        cfg_path = write_config(tmp_path, tiny_control_doc())
        out = tmp_path / "out"
        assert main(["control", "run", "--config", cfg_path,
                     "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["mode"] == "control"
        assert summary["discrepancy_within_slack"] is True
        assert summary["diagnostics"]["ok"] is True
        assert summary["pair_norm_max"] <= summary["certified_radius"] + 1e-9
        cols = parse_trace_csv(str(out / "trace.csv"))
        assert len(cols["t"]) == 48

    def test_sweep_rerun_byte_identical_and_seeds_override(self, tmp_path):
        doc = {
            "schema_version": 1, "mode": "sweep", "seed": 0,
            "family": "bcom", "t_grid": [64, 96, 128, 192], "seeds": 5,
            "arm": "newton", "family_kwargs": {"d": 2, "m": 2},
        }
        cfg_path = write_config(tmp_path, doc)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["sweep", "--config", cfg_path, "--out", str(out1)]) == 0
        assert main(["sweep", "--config", cfg_path, "--out", str(out2)]) == 0
        assert (out1 / "sweep.csv").read_bytes() == (out2 / "sweep.csv").read_bytes()
        lines = (out1 / "sweep.csv").read_text().splitlines()
        assert lines[0] == SWEEP_HEADER
        assert len(lines) == 1 + 4 * 5
        out3 = tmp_path / "c"
        assert main(["sweep", "--config", cfg_path, "--out", str(out3),
                     "--seeds", "6"]) == 0
        assert len((out3 / "sweep.csv").read_text().splitlines()) == 1 + 4 * 6
