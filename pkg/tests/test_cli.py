"""End-to-end command-line pipeline: artifacts, determinism, exit codes."""

import json
import os

import numpy as np
import pytest

from hybridecm.cli import main, max_parallel


def run(*argv):
    return main(list(argv))


def read(path):
    return path.read_bytes()


@pytest.fixture()
def scenario_dir(tmp_path):
    """Small cold scenario generated through the CLI."""
    out = tmp_path / "run"
    out.mkdir()
    code = run(
        "gen", "--cycle", "dynamic", "--temp", "-20", "--seed", "7",
        "--duration-s", "900", "--amplitude-a", "1.5", "--mean-a", "1.2",
        "--out", str(out / "cold"),
    )
    assert code == 0
    return out


class TestGen:
    def test_deterministic_bytes(self, tmp_path):
        args = ["gen", "--cycle", "hppc", "--temp", "-20", "--seed", "7",
                "--duration-s", "300"]
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(*args, "--out", str(a)) == 0
        assert run(*args, "--out", str(b)) == 0
        for suffix in (".csv", ".truth.csv"):
            assert read(a.with_name("a" + suffix)) == read(b.with_name("b" + suffix))

    def test_truth_file_columns(self, scenario_dir):
        header = (scenario_dir / "cold.truth.csv").read_text().splitlines()[0]
        assert header == "time_s,soc_true,u_d1_v,u_d2_v,r0_eff_ohm,voltage_clean_v"

    def test_config_echo_reproduces(self, tmp_path, scenario_dir):
        out2 = tmp_path / "again"
        code = run("gen", "--config", str(scenario_dir / "cold.config.json"),
                   "--cycle", "dynamic", "--temp", "-20", "--seed", "7",
                   "--duration-s", "900", "--amplitude-a", "1.5", "--mean-a", "1.2",
                   "--out", str(out2 / "cold") if (out2.mkdir() or True) else "")
        assert code == 0
        assert read(scenario_dir / "cold.csv") == read(out2 / "cold.csv")


class TestFitOcv:
    def test_low_rate_discharge_fit(self, tmp_path, battery):
        from hybridecm.dataio import SeriesData, write_series_csv
        from hybridecm.ecm import coulomb_socs, ocv_eval_array

        n = 400
        i = np.full(n, 2.9 * 0.05)  # C/20-style slow drain
        socs = coulomb_socs(i, 1.0, battery)
        series = SeriesData(
            dt_s=1.0, t0_s=0.0, time_s=np.arange(float(n)), current_a=i,
            voltage_v=ocv_eval_array(battery.ocv, socs) - i * 0.03,
            temp_c=np.full(n, 25.0),
        )
        src = tmp_path / "slow.csv"
        write_series_csv(series, src)
        code = run("fit-ocv", "--input", str(src), "--soc0", "1.0",
                   "--degree", "3", "--out", str(tmp_path / "curve"))
        assert code == 0
        doc = json.loads((tmp_path / "curve.ocv.json").read_text())
        assert len(doc["coeffs"]) == 4


class TestPipeline:
    def test_full_flow_with_improvement(self, tmp_path, scenario_dir):
        d = scenario_dir
        assert run("identify", "--input", str(d / "cold.csv"), "--soc0", "0.9",
                   "--out", str(d / "ident")) == 0
        assert (d / "ident.params.csv").exists()

        assert run("train", "--input", str(d / "cold.csv"),
                   "--params", str(d / "ident.params.csv"), "--soc0", "0.9",
                   "--epochs", "8", "--seed", "0", "--out", str(d / "fit")) == 0
        assert (d / "fit.model.json").exists()
        loss_rows = (d / "fit.loss.csv").read_text().splitlines()
        assert loss_rows[0] == "epoch,loss"
        assert len(loss_rows) >= 3

        assert run("estimate", "--input", str(d / "cold.csv"),
                   "--model", str(d / "fit.model.json"),
                   "--truth", str(d / "cold.truth.csv"),
                   "--out", str(d / "hyb")) == 0
        assert run("estimate", "--input", str(d / "cold.csv"),
                   "--model", str(d / "fit.model.json"), "--plain-ecm",
                   "--truth", str(d / "cold.truth.csv"),
                   "--out", str(d / "plain")) == 0
        header = (d / "hyb.traj.csv").read_text().splitlines()[0]
        assert header == ("step,time_s,soc_true,soc_est,u_d_est,"
                          "voltage_meas,voltage_pred,innovation")

        assert run("evaluate", "--candidate", str(d / "hyb.traj.csv"),
                   "--baseline", str(d / "plain.traj.csv"),
                   "--truth", str(d / "cold.truth.csv"),
                   "--scenario", "cold-dynamic", "--out", str(d / "m")) == 0
        rows = json.loads((d / "m.metrics.json").read_text())
        assert [r["model"] for r in rows] == ["ecm", "hybrid"]
        assert rows[0]["improvement_pct"] is None
        assert isinstance(rows[1]["improvement_pct"], float)

        assert run("report", "--inputs", str(d / "m.metrics.json"),
                   "--out", str(d / "rep")) == 0
        table = (d / "rep.report.csv").read_text().splitlines()
        assert table[0] == "scenario,model,mse,rmse,improvement_pct"
        assert len(table) == 3

    def test_plain_flag_equals_fresh_model(self, tmp_path, scenario_dir):
        d = scenario_dir
        assert run("identify", "--input", str(d / "cold.csv"), "--soc0", "0.9",
                   "--out", str(d / "ident")) == 0
        # an untrained model: zero epochs keeps the zero-initialized output layers
        assert run("train", "--input", str(d / "cold.csv"),
                   "--params", str(d / "ident.params.csv"), "--soc0", "0.9",
                   "--epochs", "0", "--out", str(d / "fresh")) == 0
        assert run("estimate", "--input", str(d / "cold.csv"),
                   "--model", str(d / "fresh.model.json"),
                   "--out", str(d / "a")) == 0
        assert run("estimate", "--input", str(d / "cold.csv"),
                   "--model", str(d / "fresh.model.json"), "--plain-ecm",
                   "--out", str(d / "b")) == 0
        assert read(d / "a.traj.csv") == read(d / "b.traj.csv")

    def test_freeze_ffrls_path(self, scenario_dir):
        d = scenario_dir
        assert run("identify", "--input", str(d / "cold.csv"), "--soc0", "0.9",
                   "--out", str(d / "ident")) == 0
        assert run("estimate", "--input", str(d / "cold.csv"),
                   "--freeze-ffrls", str(d / "ident.params.csv"),
                   "--out", str(d / "frozen")) == 0
        assert (d / "frozen.traj.csv").exists()


class TestErrors:
    def test_missing_input_exits_2(self, tmp_path):
        assert run("identify", "--input", str(tmp_path / "nope.csv"),
                   "--soc0", "0.9", "--out", str(tmp_path / "x")) == 2

    def test_bad_config_key_exits_2(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text('{"battery": {"capacity_amps": 2.9}}')
        assert run("gen", "--config", str(cfg), "--out", str(tmp_path / "x")) == 2

    def test_bad_column_exits_2(self, tmp_path):
        src = tmp_path / "bad.csv"
        src.write_text("time_s,current_a,voltage_v\n0,1,3.7\n")
        assert run("identify", "--input", str(src), "--soc0", "0.9",
                   "--out", str(tmp_path / "x")) == 2

    def test_model_dt_mismatch_exits_2(self, tmp_path, scenario_dir, battery):
        from hybridecm.trainer import fresh_hybrid_model, save_model

        model = fresh_hybrid_model(battery.ocv, dt_s=0.5)
        path = tmp_path / "half.model.json"
        save_model(model, path)
        assert run("estimate", "--input", str(scenario_dir / "cold.csv"),
                   "--model", str(path), "--out", str(tmp_path / "x")) == 2


class TestThreadsCap:
    def test_reads_environment(self, monkeypatch):
        monkeypatch.setenv("HYBRID_ECM_THREADS", "3")
        assert max_parallel() == 3

    def test_rejects_garbage(self, monkeypatch):
        from hybridecm.dataio import SchemaError

        monkeypatch.setenv("HYBRID_ECM_THREADS", "many")
        with pytest.raises(SchemaError):
            max_parallel()

    def test_defaults_to_cpu_count(self, monkeypatch):
        monkeypatch.delenv("HYBRID_ECM_THREADS", raising=False)
        assert max_parallel() >= 1
