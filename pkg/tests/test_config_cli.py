from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from csemchan import __version__, cli, config as cfg
from csemchan.errors import ConfigError, ConvergenceError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY = """\
seed: 1
f_c: 29979245800.0
geometry: {R_t: 0.02, R_r: 0.01, D: 10.0}
users: {K: 3}
environment: {sigma_DS: 0.008, sigma_AS: 0.008, sigma_ES: 0.008, radius: 0.0025, Q_mean: 3}
solver: {P: 9, method: direct, mom_D: 16, N_s: 16}
power: {dBm: [10, 30]}
capacity: {ensemble_size: 2, precoders: [mmse, slnr]}
sweep: {K_values: [2, 3], P_values: [1, 2, 3, 4]}
stats: {ensemble_size: 2, lags: [0.0, 0.01], offsets: [0.0, 0.001], mom_D: 16, N_s: 16}
pattern: {resolution: 37}
"""


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY)
    return p


def _err(text, tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text(text)
    with pytest.raises(ConfigError) as e:
        cfg.load_scenario(p)
    return str(e.value)


def test_load_resolves_units_and_objects(tiny):
    sc = cfg.load_scenario(tiny)
    assert sc.wavelength == pytest.approx(0.01, rel=1e-15)
    assert np.allclose(sc.powers_W(), [1e-2, 1.0])
    assert sc.flags == ()
    mu = sc.multi_user(sc.operator())
    assert mu.K == 3 and mu.method == "direct" and mu.D == 16
    st = sc.stats_scenario()
    assert st.delta == 0.005 and np.linalg.norm(np.subtract(st.rx_point, [10.0, 0, 0])) == pytest.approx(0.0095)
    assert json.loads(sc.to_json())["solver"]["P"] == 9


def test_missing_seed_is_defaulted_and_flagged(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("geometry: {R_t: 0.02, R_r: 0.2, D: 10.0}\n")
    sc = cfg.load_scenario(p)
    assert sc.seed == cfg.DEFAULT_SEED and any("seed" in f for f in sc.flags)
    rep = cfg.validate(p)
    assert rep["valid"] and rep["flags"]


def test_unknown_key_reports_line(tmp_path):
    msg = _err("seed: 0\ngeometry: {R_t: 0.02, R_r: 0.2, D: 10.0}\nsolver:\n  P: 3\n  tolerance: 1\n", tmp_path)
    assert "bad.yaml:5" in msg and "tolerance" in msg
    msg = _err("seed: 0\ngeometry: {R_t: 0.02, R_r: 0.2, D: 10.0}\nfoo: 1\n", tmp_path)
    assert "bad.yaml:3" in msg and "foo" in msg
    msg = _err("seed: 0\ngeometry: {R_t: 0.02, R_r: 0.2, D: 10.0}\nenvironment:\n  lambda_Q: 1\n", tmp_path)
    assert "bad.yaml:4" in msg


def test_geometry_and_type_diagnostics(tmp_path):
    msg = _err("seed: 0\ngeometry:\n  R_t: 0.02\n  R_r: 0.2\n  D: 0.1\n", tmp_path)
    assert "bad.yaml:5" in msg and "R_t + R_r" in msg
    msg = _err("seed: 0\ngeometry:\n  R_t: big\n  R_r: 0.2\n  D: 10\n", tmp_path)
    assert "bad.yaml:3" in msg
    assert "duplicate" in _err("seed: 0\nseed: 1\ngeometry: {R_t: 0.02, R_r: 0.2, D: 10.0}\n", tmp_path)
    assert "parse error" in _err("geometry: [1\n", tmp_path)
    assert "geometry" in _err("seed: 0\n", tmp_path)
    assert "precoder" in _err("geometry: {R_t: 0.02, R_r: 0.2, D: 10.0}\ncapacity: {precoders: [zf]}\n", tmp_path)
    with pytest.raises(ConfigError):
        cfg.load_scenario(Path("/nonexistent/config.yaml"))


def test_overrides(tiny):
    sc = cfg.load_scenario(tiny, ["solver.P=12", "power.dBm=[0, 5]"])
    assert sc.solver.P == 12 and sc.power.dBm == (0, 5)
    with pytest.raises(ConfigError):
        cfg.load_scenario(tiny, ["solver.P"])


def test_validate_reports_cost(tiny):
    rep = cfg.validate(tiny)
    assert rep["n_trunc"] >= 13 and rep["P_max"] == 2 * rep["n_trunc"] * (rep["n_trunc"] + 2)
    assert rep["kR_t"] == pytest.approx(4 * np.pi)


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.yaml")), ids=lambda p: p.name)
def test_checked_in_configs_validate(path):
    assert cfg.validate(path)["valid"]
    assert path.name in (CONFIGS / "README.md").read_text()


def _run(sub, config, out, *extra):
    return cli.main([sub, str(config), "--out", str(out), *extra])


def test_capacity_su_output_is_deterministic(tiny, tmp_path):
    assert _run("capacity-su", tiny, tmp_path / "a") == 0
    assert _run("capacity-su", tiny, tmp_path / "b") == 0
    for name in ("capacity-su.csv", "capacity-su.manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    meta, rows = cli.read_csv(tmp_path / "a" / "capacity-su.csv")
    assert meta["version"] == __version__ and meta["config"]["seed"] == 1 and "dBm" in meta["units"]
    assert list(rows[0]) == ["R_t", "R_r", "D", "P_T_dBm", "P_T_W", "capacity", "dof"]
    assert float(rows[1]["capacity"]) > float(rows[0]["capacity"]) > 0
    man = json.loads((tmp_path / "a" / "capacity-su.manifest.json").read_text())
    assert man["files"][0]["path"] == "capacity-su.csv" and len(man["files"][0]["sha256"]) == 64


def test_scene_dump_replay_is_bit_exact(tiny, tmp_path):
    assert _run("scene-dump", tiny, tmp_path / "d") == 0
    assert _run("capacity-mu", tiny, tmp_path / "r", "--scene", str(tmp_path / "d" / "scene.json")) == 0
    _, a = cli.read_csv(tmp_path / "d" / "scene-dump.csv")
    _, b = cli.read_csv(tmp_path / "r" / "capacity-mu.csv")
    assert [r["capacity"] for r in a] == [r["capacity"] for r in b]
    # the dumped scene is realization 0 of the ensemble on the same seed
    assert _run("capacity-mu", tiny, tmp_path / "e", "--set", "capacity.ensemble_size=1",
                "--set", "capacity.precoders=[]") == 0
    _, c = cli.read_csv(tmp_path / "e" / "capacity-mu.csv")
    assert [r["capacity"] for r in a] == [r["capacity"] for r in c]


def test_threads_do_not_change_output(tiny, tmp_path, monkeypatch):
    assert _run("acf", tiny, tmp_path / "a", "--threads", "1") == 0
    monkeypatch.setenv(cli.THREADS_ENV, "3")
    assert _run("acf", tiny, tmp_path / "b") == 0
    assert (tmp_path / "a" / "acf.csv").read_bytes() == (tmp_path / "b" / "acf.csv").read_bytes()
    monkeypatch.setenv(cli.THREADS_ENV, "many")
    assert _run("acf", tiny, tmp_path / "c") == 2


@pytest.mark.parametrize("sub", ["capacity-mu", "dof", "sweep-svd", "pattern", "ccf"])
def test_subcommands_emit_tables(sub, tiny, tmp_path):
    assert _run(sub, tiny, tmp_path) == 0
    man = json.loads((tmp_path / f"{sub}.manifest.json").read_text())
    for f in man["files"]:
        meta, rows = cli.read_csv(tmp_path / f["path"])
        assert rows and meta["subcommand"] == sub and f["rows"] == len(rows)


def test_error_exit_codes(tmp_path, tiny, capsys, monkeypatch):
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 0\ngeometry: {R_t: 0.02, R_r: 0.2, D: 10.0}\nsolver: {Q: 1}\n")
    assert cli.main(["capacity-su", str(bad), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "[config]" in err and "bad.yaml:3" in err

    def boom(*a):
        raise ConvergenceError("no convergence", [1.0, 0.5])

    monkeypatch.setitem(cli.COMMANDS, "dof", boom)
    assert cli.main(["dof", str(tiny), "--out", str(tmp_path)]) == 3
    assert "[optim]" in capsys.readouterr().err


def test_validate_subcommand_prints_report(tiny, capsys):
    assert cli.main(["validate", str(tiny)]) == 0
    assert json.loads(capsys.readouterr().out)["P_max"] > 0
