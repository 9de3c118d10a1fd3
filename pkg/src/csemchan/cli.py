"""Command-line driver: scenario runs with deterministic CSV output and a JSON manifest.

Every CSV starts with one ``#``-prefixed JSON line holding the artifact
version, the dBm convention, the floating-point tolerance note and the fully
resolved config, followed by a single column-header line. Each run also writes
``<subcommand>.manifest.json`` listing the produced files with SHA-256 digests.
Nothing time- or host-dependent is written, so identical (config, seed,
version) inputs give byte-identical files.

Independent jobs of one subcommand (sweep points, scattering on/off, sample
intervals) may run on a thread pool; ``--threads`` defaults to the
``CSEMCHAN_THREADS`` environment variable (1 if unset). Results are assembled
in submission order.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__, capacity as cp, channel_stats as cs, config as cfg, optim, stochastic_env as se
from .errors import ConfigError, CsemError

THREADS_ENV = "CSEMCHAN_THREADS"
DBM_NOTE = "P_T[W] = 10**((dBm - 30)/10) relative to noise power N"
FP_NOTE = "byte-identical on one platform; across platforms expect agreement to about 1e-9 relative"
SUBCOMMANDS = ("acf", "ccf", "capacity-su", "capacity-mu", "dof", "pattern", "sweep-svd", "scene-dump")


# --------------------------------------------------------------------------- output


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _header(sc: cfg.Scenario, subcommand: str) -> dict:
    return {"artifact": "csemchan", "version": __version__, "subcommand": subcommand, "units": DBM_NOTE,
            "fp_tolerance": FP_NOTE, "flags": list(sc.flags), "config": sc.to_dict()}


def csv_text(sc: cfg.Scenario, subcommand: str, columns: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    buf.write("# " + json.dumps(_header(sc, subcommand), sort_keys=True, separators=(",", ":")) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def read_csv(path: str | Path) -> tuple[dict, list[dict]]:
    """Metadata record and rows (as strings) of a result file."""
    lines = Path(path).read_text().splitlines()
    meta = json.loads(lines[0][2:])
    return meta, list(csv.DictReader(lines[1:]))


class _Writer:
    def __init__(self, sc: cfg.Scenario, subcommand: str, out: Path):
        self.sc, self.sub, self.out = sc, subcommand, out
        self.files: list[dict] = []

    def _write(self, name: str, text: str, rows: int | None):
        path = self.out / name
        path.write_text(text)
        entry = {"path": name, "sha256": hashlib.sha256(text.encode()).hexdigest()}
        if rows is not None:
            entry["rows"] = rows
        self.files.append(entry)
        return path

    def table(self, name: str, columns, rows):
        return self._write(name, csv_text(self.sc, self.sub, columns, rows), len(rows))

    def json(self, name: str, obj: dict):
        doc = dict(_header(self.sc, self.sub), **obj)
        return self._write(name, json.dumps(doc, sort_keys=True, indent=1) + "\n", None)

    def manifest(self):
        doc = dict(_header(self.sc, self.sub), files=self.files)
        path = self.out / f"{self.sub}.manifest.json"
        path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
        return path


def _run_jobs(jobs: Sequence[Callable], threads: int) -> list:
    if threads <= 1 or len(jobs) <= 1:
        return [j() for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(lambda f: f(), jobs))


def _geometry_variants(sc: cfg.Scenario) -> list[dict]:
    sw, g = sc.sweep, sc.geometry
    axes = (sw.R_t_values or (g.R_t,), sw.R_r_values or (g.R_r,), sw.D_values or (g.D,))
    return [{"R_t": a, "R_r": b, "D": c} for a, b, c in itertools.product(*axes)]


# --------------------------------------------------------------------------- subcommands


def cmd_capacity_su(sc, out: _Writer, threads: int, args):
    P_T = sc.powers_W()

    def job(v):
        return v, cp.single_user_capacity(sc.operator(**v), P_T, sc.power.N)

    rows = []
    for v, rep in _run_jobs([lambda v=v: job(v) for v in _geometry_variants(sc)], threads):
        for i, d in enumerate(sc.power.dBm):
            rows.append((v["R_t"], v["R_r"], v["D"], d, P_T[i], rep.capacity[i], rep.dof[i]))
    out.table("capacity-su.csv", ["R_t", "R_r", "D", "P_T_dBm", "P_T_W", "capacity", "dof"], rows)


def cmd_dof(sc, out: _Writer, threads: int, args):
    P_T = sc.powers_W()

    def job(v):
        op = sc.operator(**v)
        return v, op, cp.single_user_capacity(op, P_T, sc.power.N)

    rows, spectrum = [], []
    for v, op, rep in _run_jobs([lambda v=v: job(v) for v in _geometry_variants(sc)], threads):
        for i, d in enumerate(sc.power.dBm):
            rows.append((v["R_t"], v["R_r"], v["D"], d, P_T[i], rep.dof[i]))
        for p, s in enumerate(np.sort(np.abs(op.sigma))[::-1], start=1):
            spectrum.append((v["R_t"], v["R_r"], v["D"], p, s))
    out.table("dof.csv", ["R_t", "R_r", "D", "P_T_dBm", "P_T_W", "dof"], rows)
    out.table("dof-spectrum.csv", ["R_t", "R_r", "D", "rank", "sigma_abs"], spectrum)


_MU_COLUMNS = ["R_t", "R_r", "D", "variant", "scattering", "P_T_dBm", "P_T_W", "capacity", "stderr",
               "ensemble_size", "unconverged"]


def _mu_rows(v, variant, ws, rep, dBm, unconverged=0):
    return [(v["R_t"], v["R_r"], v["D"], variant, ws, d, rep.P_T[i], rep.capacity[i], rep.stderr[i],
             rep.ensemble_size, unconverged) for i, d in enumerate(dBm)]


def cmd_capacity_mu(sc, out: _Writer, threads: int, args):
    P_T, N, n = sc.powers_W(), sc.power.N, sc.capacity.ensemble_size
    if args.scene:
        scene, users, v = load_scene_dump(args.scene)
        op = sc.operator(**v)
        mu = sc.multi_user(op, K=len(users))
        rows = []
        for ws in sc.capacity.scattering:
            rates, unc = cp.realization_rates(mu, scene, users, P_T, N, ws)
            rep = cp.CapacityReport(P_T, rates, np.zeros(P_T.size), 1)
            rows += _mu_rows(v, "scene", ws, rep, sc.power.dBm, unc)
        out.table("capacity-mu.csv", _MU_COLUMNS, rows)
        return
    ops = {i: sc.operator(**v) for i, v in enumerate(_geometry_variants(sc))}
    jobs, keys = [], []
    for i, v in enumerate(_geometry_variants(sc)):
        mu = sc.multi_user(ops[i])
        for ws in sc.capacity.scattering:
            keys.append((v, "optimised", ws))
            jobs.append(lambda mu=mu, ws=ws: cp.multi_user_capacity(mu, P_T, N, n, sc.seed, ws))
            for pk in sc.capacity.precoders:
                keys.append((v, pk, ws))
                jobs.append(lambda mu=mu, ws=ws, pk=pk: cp.multi_user_capacity_precoded(mu, pk, P_T, N, n, sc.seed,
                                                                                          ws))
    rows = []
    for (v, variant, ws), rep in zip(keys, _run_jobs(jobs, threads)):
        rows += _mu_rows(v, variant, ws, rep, sc.power.dBm, rep.tags.get("unconverged", 0))
    out.table("capacity-mu.csv", _MU_COLUMNS, rows)


def cmd_scene_dump(sc, out: _Writer, threads: int, args):
    v = _geometry_variants(sc)[0]
    op = sc.operator(**v)
    mu = sc.multi_user(op)
    g = se.realization_streams(sc.seed, 1)[0]
    scene, users = mu.draw(g)
    s = optim.symbols_of(users)
    out.json("scene.json", {"geometry_variant": v, "scene": scene.to_dict(),
                            "symbols": [[float(z.real), float(z.imag)] for z in s],
                            "w": [[[float(z.real), float(z.imag)] for z in u.w] for u in users]})
    P_T = sc.powers_W()
    rows = []
    for ws in sc.capacity.scattering:
        rates, unc = cp.realization_rates(mu, scene, users, P_T, sc.power.N, ws)
        rep = cp.CapacityReport(P_T, rates, np.zeros(P_T.size), 1)
        rows += _mu_rows(v, "scene", ws, rep, sc.power.dBm, unc)
    out.table("scene-dump.csv", _MU_COLUMNS, rows)


def load_scene_dump(path: str | Path):
    """Scene, users and geometry variant from a ``scene.json`` written by ``scene-dump``."""
    try:
        doc = json.loads(Path(path).read_text())
        scene = se.Scene.from_dict(doc["scene"])
        symbols = np.array([complex(a, b) for a, b in doc["symbols"]])
        w = np.array([[complex(a, b) for a, b in row] for row in doc["w"]], dtype=complex).reshape(-1, 3)
        users = optim.make_users(scene.users, symbols, w if len(w) else None)
        return scene, users, doc["geometry_variant"]
    except (OSError, KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"{path}: unreadable scene dump: {e}") from e


def sweep_users(sc: cfg.Scenario, op) -> list[tuple[int, list]]:
    """Random users for each ``sweep.K_values`` entry, one independent stream per K."""
    out = []
    for K, g in zip(sc.sweep.K_values, se.realization_streams(sc.seed, len(sc.sweep.K_values))):
        _, users = sc.multi_user(op, K=K, user_positions=None).draw(g)
        out.append((K, users))
    return out


def cmd_sweep_svd(sc, out: _Writer, threads: int, args):
    op = sc.operator()
    P_T = sc.powers_W()

    def job(K, users):
        P_range = sc.sweep.P_values or range(1, min(op.P_max, 4 * K) + 1)
        return K, [(d, optim.sweep_svd_order(users, op, P_range, pt)) for d, pt in zip(sc.power.dBm, P_T)]

    rows = []
    for K, per in _run_jobs([lambda K=K, u=u: job(K, u) for K, u in sweep_users(sc, op)], threads):
        for d, res in per:
            rows += [(K, d, r.P, r.err, r.power, r.lam) for r in res]
    out.table("sweep-svd.csv", ["K", "P_T_dBm", "P", "err", "power", "lam"], rows)


def cmd_pattern(sc, out: _Writer, threads: int, args):
    op = sc.operator()
    mu = sc.multi_user(op)
    _, users = mu.draw(se.realization_streams(sc.seed, 1)[0])
    P = min(sc.solver.P, op.P_max)
    B = optim.build_beam_vectors(users, op, P)
    res = optim.solve_p1(B, optim.symbols_of(users), float(sc.powers_W()[-1]))
    pat = cs.radiation_pattern(res.j, op, sc.pattern.cut, sc.pattern.resolution, radius=sc.pattern.radius,
                               fixed_angle=sc.pattern.fixed_angle)
    rows = [(np.degrees(a), er, et, ep) for a, er, et, ep in zip(pat.angles, pat.E_r, pat.E_theta, pat.E_phi)]
    out.table("pattern.csv", ["angle_deg", "E_r", "E_theta", "E_phi"], rows)
    out.table("pattern-users.csv", ["user", "x", "y", "z"], [(i, *u.position) for i, u in enumerate(users)])


def _corr_rows(prefix, res: cs.CorrelationResult):
    return [(*prefix, lag, v.real, v.imag, abs(v), e) for lag, v, e in zip(res.lags, res.values, res.stderr)]


def cmd_acf(sc, out: _Writer, threads: int, args):
    base = sc.stats_scenario()
    st = sc.stats
    jobs, keys = [], []
    for t_ref in st.t_refs:
        for ws in sc.capacity.scattering:
            keys.append((t_ref, ws))
            jobs.append(lambda t_ref=t_ref, ws=ws: cs.temporal_acf_intervals(
                base, st.lags, st.ensemble_size, sc.seed, sc.grid.deltas, t_ref=t_ref, with_scattering=ws))
    rows = []
    for (t_ref, ws), res in zip(keys, _run_jobs(jobs, threads)):
        for delta in sc.grid.deltas:
            rows += _corr_rows((t_ref, delta, ws), res[delta])
    out.table("acf.csv", ["t_ref", "delta", "scattering", "lag_s", "re", "im", "abs", "stderr"], rows)


def cmd_ccf(sc, out: _Writer, threads: int, args):
    st = sc.stats
    jobs, keys = [], []
    for delta in sc.grid.deltas:
        base = sc.stats_scenario(delta)
        for ws in sc.capacity.scattering:
            keys.append((delta, ws))
            jobs.append(lambda base=base, ws=ws: cs.spatial_ccf(base, st.offsets, st.ensemble_size, sc.seed,
                                                                with_scattering=ws))
    rows = []
    for (delta, ws), res in zip(keys, _run_jobs(jobs, threads)):
        rows += _corr_rows((delta, ws), res)
    out.table("ccf.csv", ["delta", "scattering", "offset_m", "re", "im", "abs", "stderr"], rows)


COMMANDS: dict[str, Callable] = {
    "acf": cmd_acf, "ccf": cmd_ccf, "capacity-su": cmd_capacity_su, "capacity-mu": cmd_capacity_mu,
    "dof": cmd_dof, "pattern": cmd_pattern, "sweep-svd": cmd_sweep_svd, "scene-dump": cmd_scene_dump,
}


# --------------------------------------------------------------------------- entry point


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="csemchan", description="Continuous-space EM channel experiments.")
    ap.add_argument("--version", action="version", version=f"csemchan {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS + ("validate",):
        p = sub.add_parser(name)
        p.add_argument("config", help="YAML scenario file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY.PATH=VALUE",
                       help="override a config value (value parsed as YAML); repeatable")
        if name != "validate":
            p.add_argument("--out", help="output directory (default: output.dir of the config)")
            p.add_argument("--threads", type=int, default=None, help=f"worker threads (default ${THREADS_ENV} or 1)")
        if name == "capacity-mu":
            p.add_argument("--scene", help="evaluate one scene dumped by scene-dump instead of an ensemble")
    return ap


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "validate":
        report = cfg.validate(args.config, args.overrides)
        print(json.dumps(report, sort_keys=True, indent=1))
        return 0
    sc = cfg.load_scenario(args.config, args.overrides)
    threads = args.threads if args.threads is not None else _default_threads()
    if threads < 1:
        raise ConfigError("--threads must be >= 1")
    out = Path(args.out or sc.output.dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"{out}: cannot create output directory: {e.strerror}") from e
    w = _Writer(sc, args.command, out)
    COMMANDS[args.command](sc, w, threads, args)
    w.manifest()
    for f in w.files:
        print(out / f["path"])
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    """Exit status 0 on success, 2 for config errors, 3 for numerical errors."""
    try:
        return run(argv)
    except ConfigError as e:
        print(f"csemchan: error [config]: {e}", file=sys.stderr)
        return 2
    except CsemError as e:
        print(f"csemchan: error [{e.module}]: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
