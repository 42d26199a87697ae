import json
import os
import subprocess
import sys

import numpy as np
import pytest

from epreliab import cli
from epreliab.core import EventLog, ModuleRef
from epreliab.io import (InputError, dump_json, format_event_csv, load_json, read_event_csv, topology_from_doc,
                         write_event_csv)
from epreliab.simulate import SimConfig, two_parent_params, two_parent_topology, simulate_system

M11, M12, M21 = ModuleRef(1, 1), ModuleRef(1, 2), ModuleRef(2, 1)

TWO_PARENT = {"topology": [2, 1], "params": {"uniform": {"lambda0": 0.5, "alpha": 0.3, "beta": 0.3, "stage1_rate": 0.2}},
        "window_length": 300.0, "replications": 2, "seed": 7}


def write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


class TestCSV:
    def test_round_trip_bit_exact(self, tmp_path):
        logs = {r: simulate_system(SimConfig(two_parent_topology(), two_parent_params(), 400.0, seed=1, replication=r))
                for r in range(3)}
        p = tmp_path / "ev.csv"
        write_event_csv(p, logs)
        back = read_event_csv(p)
        assert back == logs
        for r in logs:
            for m in logs[r].modules():
                assert np.array_equal(back[r][m], logs[r][m])
        assert format_event_csv(back) == p.read_text()

    def test_header_only_for_empty_window(self, tmp_path):
        text = format_event_csv({0: EventLog(0.0, {})})
        assert text.splitlines()[-1] == "replication,stage,module,time"
        p = tmp_path / "e.csv"
        p.write_text(text)
        assert read_event_csv(p) == {0: EventLog(0.0, {})}

    def test_sorted_by_time(self):
        text = format_event_csv({0: EventLog(10, {M11: [1.0, 3.0], M21: [2.0]})})
        assert text.splitlines()[3:] == ["0,1,1,1.0", "0,2,1,2.0", "0,1,1,3.0"]

    @pytest.mark.parametrize("body, line, msg", [
        ("replication,stage,module,time\n0,1,1,x\n", 2, "cannot parse"),
        ("replication,stage,module,time\n0,1,1,1.0\n0,1\n", 3, "expected 4 fields"),
        ("rep,stage,module,time\n", 1, "expected header"),
        ("replication,stage,module,time\n0,0,1,1.0\n", 2, "stage and module"),
    ])
    def test_errors_name_the_line(self, tmp_path, body, line, msg):
        p = tmp_path / "bad.csv"
        p.write_text(body)
        with pytest.raises(InputError, match=f"bad.csv:{line}: {msg}"):
            read_event_csv(p, 10.0)

    def test_duplicate_timestamps_rejected(self, tmp_path):
        p = tmp_path / "dup.csv"
        p.write_text("replication,stage,module,time\n0,1,1,1.0\n0,1,1,1.0\n")
        with pytest.raises(InputError, match="duplicate"):
            read_event_csv(p, 10.0)

    def test_window_required(self, tmp_path):
        p = tmp_path / "now.csv"
        p.write_text("replication,stage,module,time\n")
        with pytest.raises(InputError, match="window length"):
            read_event_csv(p)


class TestJSON:
    def test_schema_version(self, tmp_path):
        p = tmp_path / "a.json"
        dump_json(p, {"x": np.float64(1.5), "y": np.arange(2)})
        doc = load_json(p)
        assert doc == {"schema_version": 1, "x": 1.5, "y": [0, 1]}

    def test_wrong_version(self, tmp_path):
        with pytest.raises(InputError, match="schema_version"):
            load_json(write(tmp_path / "v.json", {"schema_version": 99}))

    def test_bad_json_position(self, tmp_path):
        p = tmp_path / "b.json"
        p.write_text('{\n  "a": 1,\n  oops\n}')
        with pytest.raises(InputError, match=r"b.json:3:\d+"):
            load_json(p)

    def test_topology_field_diagnostic(self):
        with pytest.raises(InputError, match="'topology'"):
            topology_from_doc({})
        assert topology_from_doc({"topology": {"modules_per_stage": [2, 1]}}).modules_per_stage == (2, 1)


class TestCLI:
    def test_simulate_directory_and_determinism(self, tmp_path):
        cfg = write(tmp_path / "cfg.json", TWO_PARENT)
        assert cli.main(["simulate", cfg, "-o", str(tmp_path / "a")]) == 0
        assert cli.main(["simulate", cfg, "-o", str(tmp_path / "b")]) == 0
        for name in ("events_r0000.csv", "events_r0001.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        man = load_json(tmp_path / "a" / "manifest.json")
        assert man["seed"] == 7 and man["build"].startswith("0.1.0+") and man["config"]["replications"] == 2
        logs = read_event_csv(tmp_path / "a" / "events_r0000.csv")
        assert [str(m) for m in logs[0].modules()] == ["1.1", "1.2", "2.1"]

    def test_seed_precedence(self, tmp_path, monkeypatch):
        cfg = write(tmp_path / "cfg.json", TWO_PARENT)
        monkeypatch.setenv(cli.SEED_ENV, "123")
        cli.main(["simulate", cfg, "-o", str(tmp_path / "env.csv"), "--combined"])
        cli.main(["simulate", cfg, "-o", str(tmp_path / "flag.csv"), "--combined", "--seed", "123"])
        monkeypatch.delenv(cli.SEED_ENV)
        cli.main(["simulate", cfg, "-o", str(tmp_path / "conf.csv"), "--combined"])
        env, flag, conf = (read_event_csv(tmp_path / f"{n}.csv") for n in ("env", "flag", "conf"))
        assert env == flag and env != conf
        assert cli.resolve_seed(5, 9) == 5
        monkeypatch.setenv(cli.SEED_ENV, "nope")
        with pytest.raises(InputError):
            cli.resolve_seed(None, 1)

    def test_simulate_zero_window_header_only(self, tmp_path):
        cfg = write(tmp_path / "cfg.json", {**TWO_PARENT, "window_length": 0.0, "replications": 1})
        assert cli.main(["simulate", cfg, "-o", str(tmp_path / "z")]) == 0
        lines = (tmp_path / "z" / "events_r0000.csv").read_text().splitlines()
        assert lines[-1] == "replication,stage,module,time"

    def test_fit_and_exit_codes(self, tmp_path):
        cfg = write(tmp_path / "cfg.json", TWO_PARENT)
        ev = str(tmp_path / "ev.csv")
        cli.main(["simulate", cfg, "-o", ev, "--combined"])
        out = tmp_path / "fit.json"
        assert cli.main(["fit", ev, cfg, "-o", str(out), "--k", "3"]) == 0
        doc = load_json(out)
        assert set(doc["fits"]) == {"0", "1"} and doc["fits"]["0"]["K"] == 3
        assert cli.main(["fit", ev, cfg, "-o", str(out), "--max-iter", "1"]) == cli.EXIT_NONCONVERGED
        doc = load_json(out)
        assert all(not f["converged"] and len(f["ll_trace"]) == 1 for f in doc["fits"].values())

    def test_fit_stage1_only(self, tmp_path):
        topo = write(tmp_path / "t.json", {"topology": [1]})
        ev = tmp_path / "ev.csv"
        write_event_csv(ev, {0: EventLog(50.0, {M11: [1.0, 2.0, 30.0, 40.0, 41.0]})})
        cli.main(["fit", str(ev), topo, "-o", str(tmp_path / "f.json")])
        est = load_json(tmp_path / "f.json")["fits"]["0"]["estimates"]
        assert est["lambda0"]["1.1"] == pytest.approx(0.1)

    def test_topology_mismatch_names_module(self, tmp_path, capsys):
        topo = write(tmp_path / "t.json", {"topology": [1]})
        ev = tmp_path / "ev.csv"
        write_event_csv(ev, {0: EventLog(50.0, {M21: [1.0]})})
        assert cli.main(["fit", str(ev), topo, "-o", str(tmp_path / "f.json")]) == cli.EXIT_INPUT
        assert "2.1" in capsys.readouterr().err

    def test_input_errors(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        assert cli.main(["simulate", str(bad), "-o", str(tmp_path / "x")]) == cli.EXIT_INPUT
        cfg = write(tmp_path / "cfg.json", {k: v for k, v in TWO_PARENT.items() if k != "window_length"})
        assert cli.main(["simulate", cfg, "-o", str(tmp_path / "x")]) == cli.EXIT_INPUT

    def test_io_error(self, tmp_path):
        cfg = write(tmp_path / "cfg.json", TWO_PARENT)
        target = tmp_path / "no" / "such" / "dir" / "ev.csv"
        assert cli.main(["simulate", cfg, "-o", str(target), "--combined"]) == cli.EXIT_IO
        assert cli.main(["fit", str(tmp_path / "missing.csv"), cfg, "-o", "x.json"]) == cli.EXIT_IO

    def test_predict_poisson_closed_form(self, tmp_path):
        ev = tmp_path / "ev.csv"
        lg = EventLog(200.0, {M11: np.sort(np.random.default_rng(0).uniform(0, 200, 60))})
        write_event_csv(ev, {0: lg})
        out = tmp_path / "p.json"
        assert cli.main(["predict", str(ev), "--benchmark", "poisson", "--tau", "180", "--dtau", "20",
                         "-o", str(out)]) == 0
        row = load_json(out)["predictions"][0]
        assert row["predicted"] == pytest.approx(lg.truncate(180).count(M11) / 180 * 20, rel=1e-14)
        assert row["actual"] == lg.between(M11, 180, 200).size

    def test_predict_zero_horizon_and_range(self, tmp_path):
        cfg = write(tmp_path / "cfg.json", TWO_PARENT)
        ev = str(tmp_path / "ev.csv")
        cli.main(["simulate", cfg, "-o", ev, "--combined"])
        fitp = str(tmp_path / "f.json")
        cli.main(["fit", ev, cfg, "-o", fitp])
        out = tmp_path / "p.json"
        assert cli.main(["predict", ev, "--fit-report", fitp, "--tau", "250", "--dtau", "0", "-o", str(out)]) == 0
        assert all(r["predicted"] == 0 and r["actual"] == 0 for r in load_json(out)["predictions"])
        assert cli.main(["predict", ev, "--fit-report", fitp, "--tau", "290", "--dtau", "20",
                         "-o", str(out)]) == cli.EXIT_INPUT

    def test_evaluate(self, tmp_path, capsys):
        cfg = write(tmp_path / "cfg.json", {**TWO_PARENT, "window_length": 200.0})
        ev = str(tmp_path / "ev.csv")
        cli.main(["simulate", cfg, "-o", ev, "--combined"])
        assert cli.main(["evaluate", ev, cfg, "--tau", "180", "--dtau", "20", "-o", str(tmp_path / "e.json")]) == 0
        mae = load_json(tmp_path / "e.json")["mae"]["2.1"]
        assert set(mae) == {"ep_observed", "ep_frozen", "poisson", "musa_okumoto", "gompertz"}

    def test_select_k_trivial(self, tmp_path, capsys):
        spec = write(tmp_path / "s.json", {**TWO_PARENT, "candidates": [1], "replications": 2})
        assert cli.main(["select-k", spec, "-o", str(tmp_path / "k.json")]) == 0
        assert "K* = 1" in capsys.readouterr().out

    def test_reproduce_scale_guard(self, tmp_path, capsys):
        assert cli.main(["reproduce", "numerical", "--scale", "0.01", "--out", str(tmp_path)]) == cli.EXIT_INPUT
        assert "R=2" in capsys.readouterr().err

    def test_reproduce_numerical_smoke(self, tmp_path):
        out = tmp_path / "num"
        assert cli.main(["reproduce", "numerical", "--scale", "0.03", "--T", "100", "--K", "1", "2", "5",
                         "--out", str(out)]) == 0
        lines = (out / "estimates.csv").read_text().splitlines()
        assert lines[0] == "T,method,K,parameter,mean,sd" and len(lines) == 1 + 3 * 7
        assert load_json(out / "report.json")["R"] == 3
        assert (out / "mrrmse.csv").read_text().startswith("x,series,y\n")

    def test_reproduce_injection_labels(self, tmp_path, monkeypatch):
        import epreliab.cli as mod
        calls = []

        def fake(label, R, seed, K=1, jobs=1):
            calls.append(label)
            return {"actual_mean": 1.0, "mae": {"ep_observed": 0.5}}

        monkeypatch.setattr(mod, "injection_study", fake)
        assert cli.main(["reproduce", "injection", "--out", str(tmp_path)]) == 0
        assert calls == [f"Sce. {i}" for i in range(1, 8)]
        assert load_json(tmp_path / "report.json")["R"] == 9


def test_console_script_runs(tmp_path):
    res = subprocess.run([sys.executable, "-m", "epreliab.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "0.1.0" in res.stdout
