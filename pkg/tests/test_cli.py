import json
import subprocess
import sys

import pytest

RUN = [sys.executable, "-m", "hymlab.cli"]


def run_cli(*args):
    return subprocess.run(RUN + list(args), capture_output=True, text=True)


MINI_FLOW = """
label: mini-flow
base: {{kind: torus, tau: [0.0, 1.0], n: 16}}
bundle: {{name: atiyah, a: [1.0, 0.0]}}
initial_metric: {{recipe: atiyah-default}}
flow:
  t_max: {t_max}
  cfl_safety: 0.5
  trace_stride: 5
  checkpoint_stride: {ck}
  eps_targets: [0.5, 0.2]
"""


@pytest.fixture(scope="module")
def mini_config(tmp_path_factory):
    d = tmp_path_factory.mktemp("cfg")
    p = d / "mini.yaml"
    p.write_text(MINI_FLOW.format(t_max=0.05, ck=20))
    return p


def test_unknown_keys_rejected(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("base: {kind: torus, tau: [0.0, 1.0], n: 16, typo_key: 3}\n"
                 "bundle: {name: trivial, rank: 1}\n")
    r = run_cli("degree", "--config", str(p), "--out", str(tmp_path / "o"))
    assert r.returncode == 3
    assert "typo_key" in r.stderr


def test_unknown_bundle_lists_catalog(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("base: {kind: torus, tau: [0.0, 1.0], n: 16}\n"
                 "bundle: {name: mystery}\n")
    r = run_cli("degree", "--config", str(p), "--out", str(tmp_path / "o"))
    assert r.returncode == 3
    assert "atiyah" in r.stderr and "catalog" in r.stderr


def test_eps_targets_normalized_to_decreasing(tmp_path):
    from hymlab.config import parse_config
    cfg = parse_config(MINI_FLOW.format(t_max=0.05, ck=0)
                       .replace("[0.5, 0.2]", "[0.01, 0.5, 0.05]"))
    ctl = cfg.flow_controls()
    assert ctl.eps_targets == (0.5, 0.05, 0.01)


def test_defaults_filled(tmp_path):
    from hymlab.config import parse_config
    cfg = parse_config("base: {kind: torus, tau: [0.0, 1.0], n: 16}\n"
                       "bundle: {name: atiyah, a: [1.0, 0.0]}\n")
    assert cfg.initial_metric["recipe"] == "atiyah-default"
    assert cfg.flow_controls().cfl_safety == 0.2


def test_degree_subcommand_and_units(tmp_path):
    # the shipped grid: coarse grids cannot hold the 1e-5 independence
    # check for k = 3 (truncation scales with k)
    p = tmp_path / "deg.yaml"
    p.write_text("base: {kind: sphere, n_r: 32, n_theta: 64, r_overlap: 1.2}\n"
                 "bundle: {name: o, k: 3}\n"
                 "initial_metric: {recipe: fs}\n")
    out = tmp_path / "out"
    r = run_cli("degree", "--config", str(p), "--out", str(out))
    assert r.returncode == 0
    d = json.loads((out / "summary.json").read_text())
    assert abs(d["degree"]["value"] - 3.0) < 1e-5
    assert abs(d["degree"]["paper_eq2"] - 3.0 * 3.141592653589793) < 1e-4
    assert d["degree"]["unit"] == "internal"
    assert "tolerance" in d["degree"]
    assert abs(d["he_constant"]["value"] - 3 * 3.141592653589793) < 1e-4


def test_flow_subcommand_writes_artifacts(mini_config, tmp_path):
    out = tmp_path / "run"
    r = run_cli("flow", "--config", str(mini_config), "--out", str(out))
    assert r.returncode == 0
    assert (out / "trace.csv").exists()
    assert (out / "summary.json").exists()
    d = json.loads((out / "summary.json").read_text())
    assert d["checks"]["monotonicity"]["pass"]
    assert d["checks"]["degree_drift"]["pass"]
    ck = sorted(out.glob("checkpoint_*.bin"))
    assert ck


def test_report_subcommand(mini_config, tmp_path):
    out = tmp_path / "run"
    assert run_cli("flow", "--config", str(mini_config), "--out", str(out)).returncode == 0
    r = run_cli("report", "--config", str(mini_config), "--out", str(out))
    assert r.returncode == 0
    d = json.loads((out / "report.json").read_text())
    assert d["M_monotone"] is True
    assert "0.5" in d["he_report"]


def test_determinism_byte_identical(mini_config, tmp_path):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert run_cli("flow", "--config", str(mini_config), "--out", str(out1)).returncode == 0
    assert run_cli("flow", "--config", str(mini_config), "--out", str(out2)).returncode == 0
    assert (out1 / "summary.json").read_bytes() == (out2 / "summary.json").read_bytes()
    assert (out1 / "trace.csv").read_bytes() == (out2 / "trace.csv").read_bytes()


def test_resume_matches_unbroken(tmp_path):
    cfg_full = tmp_path / "full.yaml"
    cfg_full.write_text(MINI_FLOW.format(t_max=0.04, ck=0))
    cfg_half = tmp_path / "half.yaml"
    cfg_half.write_text(MINI_FLOW.format(t_max=0.02, ck=0))
    out_full, out_half, out_res = (tmp_path / n for n in ("full", "half", "res"))
    assert run_cli("flow", "--config", str(cfg_full), "--out", str(out_full)).returncode == 0
    assert run_cli("flow", "--config", str(cfg_half), "--out", str(out_half)).returncode == 0
    ck = sorted(out_half.glob("checkpoint_*.bin"))[-1]
    r = run_cli("flow", "--config", str(cfg_full), "--out", str(out_res),
                "--resume", str(ck))
    assert r.returncode == 0
    full = json.loads((out_full / "summary.json").read_text())
    res = json.loads((out_res / "summary.json").read_text())
    assert abs(full["M_final"]["value"] - res["M_final"]["value"]) < 1e-9
    assert abs(full["he_defect_final"]["value"] - res["he_defect_final"]["value"]) < 1e-9


def test_decompose_requires_inclusion(tmp_path):
    p = tmp_path / "noinc.yaml"
    p.write_text("base: {kind: sphere, n_r: 16, n_theta: 32, r_overlap: 1.2}\n"
                 "bundle: {name: euler_ambient}\n")
    r = run_cli("decompose", "--config", str(p), "--out", str(tmp_path / "o"))
    assert r.returncode == 3


def test_grid_override(tmp_path):
    p = tmp_path / "deg.yaml"
    p.write_text("base: {kind: sphere, n_r: 32, n_theta: 64, r_overlap: 1.2}\n"
                 "bundle: {name: o, k: 1}\n"
                 "initial_metric: {recipe: fs}\n")
    out = tmp_path / "o"
    r = run_cli("degree", "--config", str(p), "--out", str(out), "--grid", "16")
    assert r.returncode == 0
    d = json.loads((out / "summary.json").read_text())
    assert d["inputs"]["base"]["n_r"] == 16
