"""Exercise the command-line interface through real subprocesses."""

import json
import subprocess
import sys

PARAMS_CFG = {
    "physical": {
        "n_atoms": 10000, "n_photons": 2, "length": 1e-4,
        "g13": 1e9, "g24": 5e8, "omega_c": 2e9,
        "gamma31": 3e7, "gamma32": 3e7, "gamma42": 5e7,
        "delta": -6e8, "delta_int": 1e8,
    },
}

EVOLVE_CFG = {
    "lattice": {"m_sites": 3, "n_max": 2, "hop": 1.0, "u_re": 0.6,
                "kappa2": 0.4, "boundary": "periodic"},
    "run": {"t_final": 0.6, "n_times": 4, "n_trajectories": 16,
            "seed": 3, "tol": 1e-8},
}


def run_cli(*args, cwd):
    return subprocess.run([sys.executable, "-m", "polgas", *args],
                          capture_output=True, text=True, cwd=cwd,
                          timeout=120)


def write_cfg(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def test_version_flag(tmp_path):
    proc = run_cli("--version", cwd=tmp_path)
    assert proc.returncode == 0
    assert "polgas" in proc.stdout


def test_schema_prints_json(tmp_path):
    proc = run_cli("schema", cwd=tmp_path)
    assert proc.returncode == 0
    schema = json.loads(proc.stdout)
    assert set(schema) >= {"physical", "lattice", "run"}
    assert "evolve" in schema["run"]


def test_params_summary_embeds_resolved_config(tmp_path):
    cfg = write_cfg(tmp_path, PARAMS_CFG)
    proc = run_cli("params", "-c", str(cfg), "-o", str(tmp_path), cwd=tmp_path)
    assert proc.returncode == 0, proc.stderr
    data = json.loads((tmp_path / "params_summary.json").read_text())
    assert data["command"] == "params"
    assert data["config"]["physical"]["n_atoms"] == 10000
    assert data["config"]["run"]["margin"] == 0.1      # default filled in
    assert data["results"]["g_abs"] > 0
    checks = data["results"]["validity"]["checks"]
    assert all("ratio" in c for c in checks)


def test_evolve_rerun_and_round_trip_are_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, EVOLVE_CFG)
    for sub in ("a", "b"):
        proc = run_cli("evolve", "-c", str(cfg), "-o", str(tmp_path / sub),
                       cwd=tmp_path)
        assert proc.returncode == 0, proc.stderr
    first = (tmp_path / "a" / "evolve_summary.json").read_bytes()
    assert first == (tmp_path / "b" / "evolve_summary.json").read_bytes()

    # a summary is itself a valid config and reproduces itself
    proc = run_cli("evolve", "-c", str(tmp_path / "a" / "evolve_summary.json"),
                   "-o", str(tmp_path / "c"), cwd=tmp_path)
    assert proc.returncode == 0, proc.stderr
    assert first == (tmp_path / "c" / "evolve_summary.json").read_bytes()


def test_evolve_seed_override_recorded(tmp_path):
    cfg = write_cfg(tmp_path, EVOLVE_CFG)
    proc = run_cli("evolve", "-c", str(cfg), "--seed", "11",
                   "-o", str(tmp_path), cwd=tmp_path)
    assert proc.returncode == 0, proc.stderr
    data = json.loads((tmp_path / "evolve_summary.json").read_text())
    assert data["config"]["run"]["seed"] == 11
    assert data["results"]["seed"] == 11


def test_oracle_reports_coincidence_value(tmp_path):
    cfg = write_cfg(tmp_path, {"run": {"n_particles": 2, "geometry": "ring",
                                       "g_abs": 10.0, "n_photons": 2}})
    proc = run_cli("oracle", "-c", str(cfg), "-o", str(tmp_path), cwd=tmp_path)
    assert proc.returncode == 0, proc.stderr
    data = json.loads((tmp_path / "oracle_summary.json").read_text())
    expected = 0.75 * 4.0 * 3.141592653589793**2 / 300.0
    assert abs(data["results"]["tg_coincidence"] - expected) < 1e-12


def test_missing_config_exits_2(tmp_path):
    proc = run_cli("params", "-c", str(tmp_path / "nope.json"), cwd=tmp_path)
    assert proc.returncode == 2
    assert "config error" in proc.stderr


def test_unknown_key_exits_2(tmp_path):
    bad = dict(EVOLVE_CFG)
    bad["lattice"] = dict(EVOLVE_CFG["lattice"], zap=1)
    cfg = write_cfg(tmp_path, bad)
    proc = run_cli("evolve", "-c", str(cfg), cwd=tmp_path)
    assert proc.returncode == 2
    assert "zap" in proc.stderr


def test_oversized_sector_exits_3(tmp_path):
    cfg = write_cfg(tmp_path, {
        "lattice": {"m_sites": 400, "n_max": 6, "hop": 1.0},
        "run": {},
    })
    proc = run_cli("ground", "-c", str(cfg), cwd=tmp_path)
    assert proc.returncode == 3
    assert "error" in proc.stderr
