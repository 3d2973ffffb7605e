import json
import subprocess
import sys

import numpy as np
import pytest

from netsync import registry
from netsync.cli import main


def run(tmp_path, command, cfg, *extra, name="cfg.json", out="out"):
    path = tmp_path / name
    path.write_text(cfg if isinstance(cfg, str) else json.dumps(cfg))
    code = main([command, "--config", str(path), "--out", str(tmp_path / out), *extra])
    manifest = tmp_path / out / "manifest.json"
    return code, (json.loads(manifest.read_text()) if manifest.exists() else None)


def reason_lines(capsys):
    err = capsys.readouterr().err
    return [line for line in err.splitlines() if line.startswith("netsync: reason=")]


# -- graph-info ---------------------------------------------------------------------------


def test_graph_info_p3(tmp_path, capsys):
    code, m = run(tmp_path, "graph-info", {"graph": {"nodes": 3, "edges": [[1, 2], [2, 3]]}})
    assert code == 0
    out = m["outcome"]
    assert np.allclose(out["laplacian_spectrum"], [0, 1, 3], atol=1e-12)
    assert np.allclose(out["reduced_spectrum"], [1, 3], atol=1e-12)
    assert out["connected"] is True and out["c1"] == 1.0
    assert out["mu"] == pytest.approx(4 - 5**0.5, abs=1e-12)
    assert "reduced spectrum" in capsys.readouterr().out


def test_graph_info_k2(tmp_path):
    code, m = run(tmp_path, "graph-info", {"graph": {"nodes": 2, "edges": [[1, 2]]}})
    assert code == 0
    assert np.allclose(m["outcome"]["laplacian_spectrum"], [0, 2])
    assert np.allclose(m["outcome"]["reduced_spectrum"], [2])


def test_graph_info_family(tmp_path):
    code, m = run(tmp_path, "graph-info", {"graph": {"family": "ring", "nodes": 5}})
    assert code == 0 and m["outcome"]["mu"] == pytest.approx(2.0)
    assert m["config"]["graph"]["edges"][-1] == [5, 1]


def test_graph_info_disconnected(tmp_path, capsys):
    code, m = run(tmp_path, "graph-info", {"graph": {"nodes": 4, "edges": [[1, 2], [3, 4]]}})
    assert code == 2
    assert m["outcome"]["reason"] == "disconnected-graph"
    assert reason_lines(capsys) == ["netsync: reason=disconnected-graph communication graph is not connected"]


def test_parse_error_reports_line(tmp_path, capsys):
    code, m = run(tmp_path, "graph-info", '{"graph": {"nodes": 3,\n "edges": [[1, 2] [2, 3]]}}')
    assert code == 1
    lines = reason_lines(capsys)
    assert len(lines) == 1 and "line 2" in lines[0]


def test_field_error_names_field(tmp_path, capsys):
    code, _ = run(tmp_path, "graph-info", {"graph": {"nodes": 3, "edges": [[1, 4]]}})
    assert code == 1
    [line] = reason_lines(capsys)
    assert "graph.edges" in line and "index-out-of-range" in line


def test_missing_file_and_bad_usage(tmp_path, capsys):
    assert main(["check", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["check"]) == 1
    lines = reason_lines(capsys)
    assert len(lines) == 3 and all(" " in line for line in lines)


# -- check ------------------------------------------------------------------------------------


def test_check_builtin_suite_passes(tmp_path):
    code, m = run(tmp_path, "check", {"system": "paper-5B-a"})
    assert code == 0
    checks = m["outcome"]["checks"]
    assert set(checks) == {"bounds", "integrability", "cmf-kernel", "cmf-strengthened", "killing"}
    assert all(c["passed"] for c in checks.values())
    assert m["config"]["grid"] == 21 and m["config"]["random"] == 1000


def test_check_perturbed_integrability_fails(tmp_path, capsys):
    code, m = run(tmp_path, "check", {"system": "paper-5B-a-perturbed-U", "checks": ["integrability"]})
    assert code == 2
    assert not m["outcome"]["checks"]["integrability"]["passed"]
    assert m["outcome"]["checks"]["integrability"]["worst_margin"] >= 0.1
    assert reason_lines(capsys) == ["netsync: reason=check-failed failed: integrability"]


def test_check_weak_rho_strengthened_fails(tmp_path):
    code, m = run(tmp_path, "check", {"system": "scalar-sine-weak", "checks": ["cmf-strengthened"]})
    assert code == 2
    rep = m["outcome"]["checks"]["cmf-strengthened"]
    assert rep["worst_margin"] == pytest.approx(3.0, abs=1e-12) and rep["worst_point"] == [0.0]


def test_check_grid_flag(tmp_path):
    code, m = run(tmp_path, "check", {"system": "scalar-sine", "random": 0, "checks": ["bounds"]}, "--grid", "7")
    assert code == 0
    assert m["outcome"]["checks"]["bounds"]["samples_checked"] == 7


def test_check_user_defined_system(tmp_path):
    cfg = {
        "system": {"states": ["z1", "z2"], "f": ["-z1 + sin(z2)*cos(z1) + z2", "0"], "g": [["0"], ["2 + sin(z1)"]],
                   "name": "user-5B"},
        "certificate": {"P": [[2, 1], [1, 2]], "U": "z1 + 2*z2", "alpha": ["1/(2 + sin(z1))"], "rho": 2,
                        "q_margin": 0.6},
        "killing": {"g_a": ["0", "2 + sin(z1)"], "q_a": "2 + sin(z1)"},
        "box": [[-3.141592653589793, 3.141592653589793]] * 2,
        "grid": 11, "random": 50,
    }
    code, m = run(tmp_path, "check", cfg)
    assert code == 0
    assert m["outcome"]["checks"]["cmf-kernel"]["worst_margin"] <= -0.6 + 1e-9


def test_check_bad_expression(tmp_path, capsys):
    cfg = {"system": {"states": ["z"], "f": ["__import__('os')"], "g": [["1"]]},
           "certificate": {"P": [[1]], "U": "z", "alpha": ["1"]}, "box": [[-1, 1]]}
    code, _ = run(tmp_path, "check", cfg)
    assert code == 1
    assert "unknown name" in reason_lines(capsys)[0]


def test_check_numerical_failure(tmp_path, capsys):
    cfg = {"system": {"states": ["z"], "f": ["log(z)"], "g": [["1"]]},
           "certificate": {"P": [[1]], "U": "z", "alpha": ["1"]}, "box": [[-1, 1]], "checks": ["cmf-kernel"]}
    code, m = run(tmp_path, "check", cfg)
    assert code == 3
    assert m["outcome"]["reason"] == "numerical"
    assert reason_lines(capsys)[0].startswith("netsync: reason=numerical")


# -- synthesize --------------------------------------------------------------------------------


def test_synthesize_global(tmp_path):
    code, m = run(tmp_path, "synthesize", {"system": "scalar-sine", "graph": {"family": "ring", "nodes": 3}})
    assert code == 0
    ctrl = m["outcome"]["controller"]
    assert ctrl["kind"] == "global"
    assert ctrl["gain"]["mu"] == pytest.approx(6.0) and ctrl["gain"]["c1"] == 1.0
    assert ctrl["ell"] == pytest.approx(1.25 * 4 / 6, rel=1e-8)
    s = m["outcome"]["structure"]
    assert s["passed"] and s["max_phi_on_manifold"] <= 1e-12
    assert m["config"]["controller"]["kind"] == "global"


def test_synthesize_local_refuses_failed_prerequisites(tmp_path, capsys):
    cfg = {"system": "scalar-sine-weak", "graph": {"family": "path", "nodes": 3}, "controller": {"kind": "local"}}
    code, m = run(tmp_path, "synthesize", cfg)
    assert code == 2 and m["outcome"]["reason"] == "prerequisite-failed"
    assert "cmf-strengthened" in reason_lines(capsys)[0]
    code, _ = run(tmp_path, "synthesize", cfg, "--override-gain")
    assert code == 1  # override needs an explicit gain
    cfg["controller"]["gain"] = 0.5
    code, m = run(tmp_path, "synthesize", cfg, "--override-gain")
    assert code == 0 and m["outcome"]["controller"]["ell"] == 0.5


def test_synthesize_low_gain_refused(tmp_path):
    cfg = {"system": "scalar-sine", "graph": {"family": "ring", "nodes": 3}, "controller": {"gain": 0.1}}
    code, m = run(tmp_path, "synthesize", cfg)
    assert code == 2 and m["outcome"]["reason"] == "block-check-failed"


# -- backstep ------------------------------------------------------------------------------------


def test_backstep_registers(tmp_path):
    cfg = {"backstepping": {"base": "paper-5B-a", "name": "cli-5B-backstepped"}, "grid": 9, "random": 100}
    code, m = run(tmp_path, "backstep", cfg)
    assert code == 0
    out = m["outcome"]
    assert out["eta"] == pytest.approx(1.1) and out["verification"]["passed"]
    assert out["registered"] == "cli-5B-backstepped"
    assert "cli-5B-backstepped" in registry.names()
    P0 = np.array(out["P_b_origin"])
    w = np.array([1.1, 2.2, 2.0])  # (eta alpha P g_a, q) at the origin
    expected = np.outer(w, w)
    expected[:2, :2] += [[2, 1], [1, 2]]
    assert np.allclose(P0, expected, rtol=1e-14)


def test_backstep_small_eta_fails(tmp_path, capsys):
    cfg = {"backstepping": {"base": "paper-5B-a", "eta": 0.3, "name": "cli-small"}, "grid": 7, "random": 0}
    code, m = run(tmp_path, "backstep", cfg)
    assert code == 2
    assert m["outcome"]["reason"] == "backstepping-unverified"
    assert "worst point" in reason_lines(capsys)[0]


# -- simulate and sweep ------------------------------------------------------------------------


GLOBAL = {"system": "scalar-sine", "graph": {"family": "ring", "nodes": 5},
          "simulation": {"T": 4, "dt": 1e-3, "decimate": 10, "x0": {"spread": [-10, 10]}}}


def test_simulate_global_and_determinism(tmp_path):
    code, m1 = run(tmp_path, "simulate", GLOBAL, out="a")
    assert code == 0
    exp = m1["outcome"]["experiment"]
    assert exp["verdicts"]["synchronized"] and exp["V_fit"]["lambda"] >= 1.8
    code, m2 = run(tmp_path, "simulate", GLOBAL, out="b")
    assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()
    m1.pop("timestamp"), m2.pop("timestamp")
    assert m1 == m2
    assert m1["input_digest"] and m1["tool_version"]
    assert m1["config"]["simulation"]["window"] == [0.8, 3.2]


def test_simulate_seed_changes_initial_state(tmp_path):
    run(tmp_path, "simulate", GLOBAL, "--seed", "1", out="a")
    run(tmp_path, "simulate", GLOBAL, "--seed", "2", out="b")
    a = (tmp_path / "a" / "trace.csv").read_text().splitlines()[1]
    b = (tmp_path / "b" / "trace.csv").read_text().splitlines()[1]
    assert a != b


def test_simulate_zero_gain_not_synchronized(tmp_path, capsys):
    cfg = {"system": "scalar-unstable", "graph": {"family": "ring", "nodes": 3}, "controller": {"gain": 0.0},
           "simulation": {"T": 2, "dt": 1e-2, "x0": [0.1, 0.2, 0.3]}}
    code, m = run(tmp_path, "simulate", cfg, "--override-gain")
    assert code == 2
    assert m["outcome"]["reason"] == "not-synchronized"
    assert m["outcome"]["experiment"]["fit"]["lambda"] < 0


def test_simulate_bad_initial_state(tmp_path):
    cfg = dict(GLOBAL, simulation={"T": 1, "x0": [1, 2]})
    code, _ = run(tmp_path, "simulate", cfg)
    assert code == 1


def test_sweep_reports_largest_delta(tmp_path):
    cfg = {"system": "scalar-sine", "graph": {"family": "path", "nodes": 3}, "controller": {"kind": "local"},
           "simulation": {"T": 4, "dt": 1e-2, "x0": {"z0": [0.5]}}, "sweep": {"deltas": [0.1, 0.01]}}
    code, m = run(tmp_path, "sweep", cfg)
    assert code == 0
    assert m["outcome"]["largest_synchronizing_delta"] == 0.1
    assert set(m["outcome"]["runs"]) == {"0.01", "0.1"}
    assert (tmp_path / "out" / "sweep-delta-0.1.csv").exists()
    index = (tmp_path / "out" / "results.csv").read_text().splitlines()
    assert len(index) == 3


def test_module_entry_point(tmp_path):
    cfg = tmp_path / "g.json"
    cfg.write_text(json.dumps({"graph": {"nodes": 2, "edges": [[1, 2]]}}))
    proc = subprocess.run([sys.executable, "-m", "netsync", "graph-info", "--config", str(cfg),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert proc.returncode == 0 and "mu" in proc.stdout
