import json
import math

import numpy as np
import pytest

from rfmem import cli
from rfmem import experiments as ex


def _write(tmp_path, text, name="exp.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


SMALL_TRAIN = """[experiment]
kind = train
seed = 7

[train]
d = 10
psi_p = 8
psi_n = 2
t = 0.1
tau_max = 1e5
n_tau = 20
score_samples = 2000
"""


class TestConfig:
    def test_unknown_key_reports_line(self, tmp_path):
        path = _write(tmp_path, "[experiment]\nkind = train\n\n[train]\nd = 10\npsi_pp = 8\n")
        with pytest.raises(ex.ConfigError, match=r"psi_pp.*line 6"):
            ex.load_config(path)

    def test_unknown_section(self, tmp_path):
        path = _write(tmp_path, "[experiment]\nkind = train\n[spectrum]\nt = 1\n")
        with pytest.raises(ex.ConfigError, match="spectrum"):
            ex.load_config(path)

    def test_bad_value(self, tmp_path):
        path = _write(tmp_path, "[experiment]\nkind = train\n[train]\nd = ten\n")
        with pytest.raises(ex.ConfigError, match=r"\[train\] d \(line 4\)"):
            ex.load_config(path)

    def test_empty_list(self):
        with pytest.raises(ex.ConfigError, match="empty"):
            ex.resolve("phase", {"psi_n": ""})

    def test_unknown_kind(self):
        with pytest.raises(ex.ConfigError):
            ex.resolve("fit", {})

    def test_defaults(self):
        cfg = ex.resolve("phase", {})
        assert cfg.parameters["tau"] == [1e3, 1e4]
        assert ex.resolve("train", {}).parameters["n_noise"] == 100

    def test_range_checks(self):
        with pytest.raises(ex.ConfigError):
            ex.resolve("train", {"t": "0"})
        with pytest.raises(ex.ConfigError):
            ex.resolve("generate", {"n_train": "1"})

    def test_manifest_round_trip(self, tmp_path):
        cfg = ex.load_config(_write(tmp_path, SMALL_TRAIN))
        cfg.output_dir = str(tmp_path / "a")
        assert ex.run(cfg) == ex.EXIT_OK
        again = ex.load_config(tmp_path / "a" / "manifest.json")
        assert again.to_dict() == cfg.to_dict()
        again.output_dir = str(tmp_path / "b")
        assert ex.run(again) == ex.EXIT_OK
        assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()


class TestRun:
    def test_deterministic(self, tmp_path):
        for sub in ("x", "y"):
            cfg = ex.load_config(_write(tmp_path, SMALL_TRAIN))
            cfg.output_dir = str(tmp_path / sub)
            assert ex.run(cfg) == ex.EXIT_OK
        a, b = (tmp_path / "x" / "trace.csv").read_bytes(), (tmp_path / "y" / "trace.csv").read_bytes()
        assert a == b

    def test_csv_format(self, tmp_path):
        cfg = ex.load_config(_write(tmp_path, SMALL_TRAIN))
        cfg.output_dir = str(tmp_path / "o")
        ex.run(cfg)
        text = (tmp_path / "o" / "trace.csv").read_text()
        assert text.startswith("# rfmem-csv/1")
        assert "\r" not in text
        header, rows = ex.read_csv(tmp_path / "o" / "trace.csv")
        assert header == list(ex.TRACE_HEADER)
        rows = np.array(rows)
        np.testing.assert_allclose(rows[:, 3], rows[:, 2] - rows[:, 1], atol=1e-12)

    def test_numerical_failure_exit(self, tmp_path):
        text = SMALL_TRAIN.replace("n_tau = 20", "optimizer = adam\neta = 1e4\nn_steps = 1000\nn_tau = 20")
        cfg = ex.load_config(_write(tmp_path, text))
        cfg.output_dir = str(tmp_path / "f")
        assert ex.run(cfg) == ex.EXIT_NUMERICAL
        err = json.loads((tmp_path / "f" / "error.json").read_text())
        assert err["kind"] == "numerical" and err["type"] == "StepSizeError"
        assert not (tmp_path / "f" / "trace.csv").exists()

    def test_cell_seed(self):
        assert ex.cell_seed(1, 2, 3) == ex.cell_seed(1, 2, 3)
        assert ex.cell_seed(1, 2, 3) != ex.cell_seed(1, 3, 2)

    def test_workers_env(self, monkeypatch):
        monkeypatch.setenv(ex.WORKERS_ENV, "3")
        assert ex.workers() == 3
        monkeypatch.setenv(ex.WORKERS_ENV, "zero")
        with pytest.raises(ex.ConfigError):
            ex.workers()

    def test_parallel_matches_serial(self, monkeypatch):
        cfg = ex.resolve("phase", {"d": "10", "psi_n": "1,4", "psi_p": "4,8", "tau": "10,100"}, seed=3)
        monkeypatch.setenv(ex.WORKERS_ENV, "1")
        serial = ex.phase_sweep(cfg).l_gen
        monkeypatch.setenv(ex.WORKERS_ENV, "2")
        np.testing.assert_array_equal(ex.phase_sweep(cfg).l_gen, serial)


@pytest.fixture(scope="module")
def grid():
    cfg = ex.resolve("phase", {"d": "20", "psi_n": "1,4,16,64", "psi_p": "4,16",
                               "tau": "100,1000,10000"}, seed=0)
    return ex.phase_sweep(cfg)


class TestPhase:
    def test_shape(self, grid):
        assert grid.l_gen.shape == (4, 2, 3)
        assert not grid.failures
        assert len(list(grid.rows())) == 24

    def test_non_negative(self, grid):
        assert np.all(grid.l_gen > -1e-3)

    def test_transition_line_moves_with_tau(self, grid):
        line = np.nan_to_num(grid.smallest_generalizing_psi_n(0.01), nan=np.inf)
        # columns are increasing tau: the generalizing threshold can only rise
        assert np.all(line[:, 1:] >= line[:, :-1])

    def test_overfitting_grows(self):
        cfg = ex.resolve("phase", {"d": "50", "psi_n": "8", "psi_p": "64"}, seed=0)
        lg = ex.phase_sweep(cfg).l_gen[0, 0]
        assert lg[1] >= lg[0] - 1e-3

    def test_underparametrized_cell_small(self):
        cfg = ex.resolve("phase", {"d": "50", "psi_n": "64,8", "psi_p": "4,64"}, seed=0)
        lg = ex.phase_sweep(cfg).l_gen
        assert np.all(lg[0, 0] < 0.02)
        assert np.all(lg[0, 0] < 0.1 * lg[1, 1])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ex.PhaseGrid([1], [2], [3], np.zeros((2, 1, 1)))


class TestCollapseSummary:
    def test_fit(self):
        runs = [{"tau_star": 2.0 * m, "tau_mem": m, "tau_gen_observed": 10.0} for m in (10.0, 20.0, 40.0)]
        s = ex.collapse_summary(runs)
        assert s["fit"]["slope"] == pytest.approx(2.0)
        assert s["fit"]["r2"] == pytest.approx(1.0)
        assert s["tau_gen_spread"] == 1.0

    def test_collapse_run(self, tmp_path):
        cfg = ex.resolve("collapse", {"d": "10", "psi_p": "8", "psi_n": "1,2", "tau_max": "1e4", "n_tau": "10",
                                      "score_samples": "1000"}, seed=1, output_dir=str(tmp_path))
        assert ex.run(cfg) == ex.EXIT_OK
        js = json.loads((tmp_path / "collapse.json").read_text())
        assert len(js["runs"]) == 2 and "slope" in js["fit"]
        assert (tmp_path / "trace_psin1.csv").exists()


class TestCli:
    def test_constants(self, capsys):
        assert cli.main(["constants", "--t", "0.1"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["t"] == 0.1 and out["order"] == 240
        assert math.isclose(out["delta_t"], -math.expm1(-0.2))

    def test_spectrum(self, tmp_path):
        assert cli.main(["spectrum", "--grid", "600", "--out", str(tmp_path), "--empirical-d", "20"]) == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["delta_weight"] == pytest.approx(55 / 64)
        header, rows = ex.read_csv(tmp_path / "density.csv")
        assert header == ["lambda", "rho_analytic", "rho2_analytic"]
        # the requested points plus lambda = 0
        assert summary["grid_points"] == len(rows) == 601

    def test_generate(self, tmp_path):
        assert cli.main(["generate", "--n-samples", "200", "--steps", "200", "--out", str(tmp_path)]) == 0
        rep = json.loads((tmp_path / "report.json").read_text())
        assert rep["f_mem"] > 0.9 and "kl" in rep
        _, rows = ex.read_csv(tmp_path / "samples.csv")
        assert len(rows) == 200

    def test_phase_config(self, tmp_path):
        cfgfile = _write(tmp_path, "[experiment]\nkind = phase\n[phase]\nd = 10\npsi_n = 1, 4\npsi_p = 4\n")
        assert cli.main(["phase", str(cfgfile), "--out", str(tmp_path / "ph")]) == 0
        assert (tmp_path / "ph" / "phase.csv").exists()

    def test_config_error_exit(self, tmp_path, capsys):
        cfgfile = _write(tmp_path, "[experiment]\nkind = phase\n[phase]\npsi_q = 1\n")
        assert cli.main(["phase", str(cfgfile), "--out", str(tmp_path / "e")]) == ex.EXIT_CONFIG
        assert "psi_q" in capsys.readouterr().err
        assert not (tmp_path / "e").exists()

    def test_kind_mismatch(self, tmp_path):
        cfgfile = _write(tmp_path, SMALL_TRAIN)
        assert cli.main(["phase", str(cfgfile)]) == ex.EXIT_CONFIG

    def test_run_manifest(self, tmp_path):
        cfgfile = _write(tmp_path, SMALL_TRAIN)
        assert cli.main(["train", str(cfgfile), "--out", str(tmp_path / "r1")]) == 0
        assert cli.main(["run", str(tmp_path / "r1" / "manifest.json"), "--out", str(tmp_path / "r2")]) == 0
        assert (tmp_path / "r1" / "trace.csv").read_bytes() == (tmp_path / "r2" / "trace.csv").read_bytes()
