"""Discretised channel dyads, temporal ACF, spatial CCF and radiation patterns.

A pair channel between Tx sample ``n`` and Rx sample ``m`` is

``H_mn = delta_t delta_r sinc_x sinc_y sinc_z (G(r_m, r'_n) + S_n(r_m))``

where ``S_n`` is the scattered dyad: column ``c`` is the MoM scattered field
at ``r_m`` for the incident field ``G(., r'_n) e_c``. The cell factor
multiplies both paths because the scatterers sit near the receiver, so the
Tx cell sees them along nearly the same direction.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
from scipy import constants as _const

from . import green, scatter, stochastic_env as se, swf
from .errors import ConfigError, DomainError, SingularityError

FieldModel = Literal["full", "far"]


def sinc(x):
    """``sin(x) / x`` with ``sinc(0) = 1``."""
    return np.sinc(np.asarray(x, dtype=float) / np.pi)


def cubic_lattice(radius: float, spacing: float, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Cell centres of a cubic lattice (one node at ``center``) inside a ball."""
    if not (radius > 0 and spacing > 0):
        raise DomainError("radius and spacing must be positive")
    m = int(np.floor(radius / spacing + 1e-12))
    ax = np.arange(-m, m + 1) * spacing
    g = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    g = g[np.linalg.norm(g, axis=1) <= radius * (1 + 1e-12)]
    return g + np.asarray(center, dtype=float)


@dataclass(frozen=True, eq=False)
class SampleGrid:
    """Tx and Rx sample points with per-axis cell lengths."""

    tx_points: np.ndarray
    tx_lengths: tuple[float, float, float]
    rx_points: np.ndarray
    rx_lengths: tuple[float, float, float]

    def __post_init__(self):
        if min(self.tx_lengths) <= 0 or min(self.rx_lengths) <= 0:
            raise DomainError("sample lengths must be positive")

    @property
    def delta_t(self) -> float:
        return float(np.prod(self.tx_lengths))

    @property
    def delta_r(self) -> float:
        return float(np.prod(self.rx_lengths))

    @property
    def N_t(self) -> int:
        return self.tx_points.shape[0]

    @property
    def M_r(self) -> int:
        return self.rx_points.shape[0]

    @classmethod
    def build(cls, geometry: swf.Geometry, delta: float, rx_points=None, delta_r: float | None = None) -> SampleGrid:
        """Cubic Tx lattice of spacing ``delta`` filling the Tx ball; Rx points default to the Rx centre."""
        tx = cubic_lattice(geometry.R_t, delta)
        rx = geometry.rx_center[None] if rx_points is None else np.atleast_2d(np.asarray(rx_points, float))
        if not np.all(se.in_rx_region(geometry, rx)):
            raise DomainError("Rx sample points must lie in the receive region")
        dr = delta if delta_r is None else delta_r
        return cls(tx, (delta,) * 3, rx, (dr,) * 3)


@dataclass(frozen=True)
class Mobility:
    """Constant-velocity Rx translation (m/s)."""

    velocity: tuple[float, float, float] = (0.0, 1.0, 0.0)

    def position(self, r0, t: float) -> np.ndarray:
        return np.asarray(r0, dtype=float) + t * np.asarray(self.velocity, dtype=float)


@dataclass(frozen=True, eq=False)
class ChannelEntry:
    """3x3 pair channel dyad; ``apply`` maps a Tx current direction to the Rx field."""

    value: np.ndarray
    m: int
    n: int
    t: float

    def apply(self, J) -> np.ndarray:
        return self.value @ np.asarray(J, dtype=complex)


def _cell_factor(r_m: np.ndarray, r_n: np.ndarray, k: float, lengths) -> np.ndarray:
    """Product of the three sinc factors; broadcasts over leading axes."""
    d = r_m - r_n
    r = np.linalg.norm(d, axis=-1, keepdims=True)
    return np.prod(sinc(k * d * np.asarray(lengths) / (2 * r)), axis=-1)


def cell_scale(grid: SampleGrid, r_m, r_n, k: float) -> np.ndarray:
    """``delta_t delta_r`` times the sinc cell factor for each Rx point."""
    return grid.delta_t * grid.delta_r * _cell_factor(np.atleast_2d(r_m), np.asarray(r_n), k, grid.tx_lengths)


class ChannelModel:
    """Direct plus scattered pair channels for one fixed set of scatterers.

    The MoM system is assembled once; per-Tx-sample responses are cached.
    """

    def __init__(self, grid: SampleGrid, k: float, scatterers: Sequence[scatter.Scatterer] = (), *,
                 field_model: FieldModel = "full", D: int = 16, N_s: int = 64,
                 basis: scatter.BasisKind = "full", omega: float | None = None, mu: float = _const.mu_0):
        if field_model not in ("full", "far"):
            raise ConfigError(f"unknown field model {field_model!r}")
        self.grid, self.k, self.field_model = grid, k, field_model
        self.omega = k * _const.c if omega is None else omega
        self.mu = mu
        scs = [s for s in scatterers if s.alive]
        self.system = scatter.assemble(scs, k, D, N_s, basis, omega=self.omega, mu=mu) if scs else None
        self._coef: dict[int, np.ndarray] = {}

    @property
    def has_scattering(self) -> bool:
        return self.system is not None and bool(self.system.scatterers)

    def _direct(self, r: np.ndarray, r_n: np.ndarray) -> np.ndarray:
        return green.dyadic_green(r, np.broadcast_to(r_n, r.shape), self.k, "far" if self.field_model == "far" else "full")

    def _coefficients(self, n: int) -> np.ndarray:
        """MoM coefficients ``(QD, 3)`` for unit dipoles along x, y, z at Tx sample ``n``."""
        if n not in self._coef:
            sys_ = self.system
            mp = sys_.match_points
            G = green.dyadic_green(mp, np.broadcast_to(self.grid.tx_points[n], mp.shape), self.k)
            T = sys_.tangential(G, sys_.match_frames)  # (rows, 3)
            self._coef[n] = -(sys_.col_scale[:, None] * (sys_.pinv @ T))
        return self._coef[n]

    def scattered_dyads(self, r, n: int) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(r, dtype=float))
        if not self.has_scattering:
            return np.zeros((pts.shape[0], 3, 3), complex)
        return self.system.field_matrix(pts) @ self._coefficients(n)

    def raw_dyads(self, r, n: int) -> np.ndarray:
        """``G + S_n`` at Rx points ``r`` without the cell factor, ``(npts, 3, 3)``."""
        pts = np.atleast_2d(np.asarray(r, dtype=float))
        r_n = self.grid.tx_points[n]
        if np.any(np.linalg.norm(pts - r_n, axis=1) == 0):
            raise SingularityError("coincident Tx and Rx sample points")
        return self._direct(pts, r_n) + self.scattered_dyads(pts, n)

    def pair_dyads(self, r, n: int) -> np.ndarray:
        """``(npts, 3, 3)`` pair channels from Tx sample ``n`` to Rx points ``r``."""
        pts = np.atleast_2d(np.asarray(r, dtype=float))
        return self.raw_dyads(pts, n) * cell_scale(self.grid, pts, self.grid.tx_points[n], self.k)[:, None, None]

    def field(self, r, J) -> np.ndarray:
        """Field ``sum_n H_n(r) J_n / delta_r`` of the sampled source current ``J`` (``(N_t, 3)``)."""
        pts = np.atleast_2d(np.asarray(r, dtype=float))
        J = np.asarray(J, dtype=complex).reshape(self.grid.N_t, 3)
        tx = self.grid.tx_points
        out = np.zeros(pts.shape, dtype=complex)
        fac = self.grid.delta_t * _cell_factor(pts[:, None, :], tx[None], self.k, self.grid.tx_lengths)  # (npts, N_t)
        for i, p in enumerate(pts):
            G = self._direct(np.broadcast_to(p, tx.shape), tx)  # (N_t, 3, 3)
            out[i] = np.einsum("n,nij,nj->i", fac[i], G, J)
        if self.has_scattering:
            sys_ = self.system
            mp = sys_.match_points
            # one incident field per Rx point so the cell factor stays per (m, n) pair
            inc = np.zeros((pts.shape[0],) + mp.shape, dtype=complex)
            for n in range(tx.shape[0]):
                gj = green.dyadic_green(mp, np.broadcast_to(tx[n], mp.shape), self.k) @ J[n]
                inc += fac[:, n, None, None] * gj[None]
            T = np.stack([sys_.tangential(e, sys_.match_frames) for e in inc], axis=-1)
            X = -(sys_.col_scale[:, None] * (sys_.pinv @ T))  # (QD, npts)
            F = sys_.field_matrix(pts)
            out += np.einsum("ica,ai->ic", F, X)
        return out


def channel_entry(grid: SampleGrid, m: int, n: int, k: float, t: float = 0.0, mobility: Mobility | None = None,
                  field_model: FieldModel = "full", scatterers: Sequence[scatter.Scatterer] = (),
                  model: ChannelModel | None = None, **kw) -> ChannelEntry:
    """Pair channel between Rx sample ``m`` (moved to time ``t``) and Tx sample ``n``."""
    mob = Mobility() if mobility is None else mobility
    r_m = mob.position(grid.rx_points[m], t)
    cm = ChannelModel(grid, k, scatterers, field_model=field_model, **kw) if model is None else model
    return ChannelEntry(cm.pair_dyads(r_m, n)[0], m, n, t)


# --------------------------------------------------------------------------- ensemble statistics


@dataclass(frozen=True)
class StatsScenario:
    """Everything the correlation estimators need; ``rx_point`` defaults near the scatterer side."""

    geometry: swf.Geometry
    params: se.EnvParams
    k: float
    delta: float
    rx_point: tuple[float, float, float] | None = None
    velocity: tuple[float, float, float] | None = None
    speed: float = 1.0
    field_model: FieldModel = "full"
    D: int = 16
    N_s: int = 64
    basis: scatter.BasisKind = "full"
    tx_index: int | None = None
    current: tuple[complex, complex, complex] = (0.0, 0.0, 1.0)

    def grid(self) -> SampleGrid:
        r = self.rx_point if self.rx_point is not None else self.geometry.rx_center
        return SampleGrid.build(self.geometry, self.delta, [r])

    def mobility(self) -> Mobility:
        if self.velocity is not None:
            return Mobility(tuple(self.velocity))
        return Mobility(tuple(self.speed * se.placement_frame(self.geometry)[1]))

    def tx_sample(self, grid: SampleGrid) -> int:
        if self.tx_index is not None:
            return self.tx_index
        return int(np.argmin(np.linalg.norm(grid.tx_points, axis=1)))

    def model(self, grid: SampleGrid, scatterers) -> ChannelModel:
        return ChannelModel(grid, self.k, scatterers, field_model=self.field_model, D=self.D, N_s=self.N_s,
                            basis=self.basis)


@dataclass
class CorrelationResult:
    """Normalised correlation at each lag with Monte-Carlo standard errors of ``|R|``."""

    lags: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    ensemble_size: int
    label: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    def first_crossing(self, level: float = 0.5) -> float:
        """First lag where ``|R|`` drops below ``level`` (``inf`` if never)."""
        idx = np.nonzero(self.magnitude < level)[0]
        return float(np.abs(self.lags[idx[0]])) if idx.size else np.inf


def _reduce(x: np.ndarray, p0: np.ndarray, p1: np.ndarray, lags, label: str, extra=None) -> CorrelationResult:
    """Correlation coefficient ``mean x / sqrt(mean p0 mean p1)`` with linearised standard errors.

    Rows are realizations; ``p0`` is the reference power, ``p1`` the power at each lag.
    The normalisation keeps ``|R| <= 1`` by Cauchy-Schwarz.
    """
    n = x.shape[0]
    P0, P1 = p0.mean(), p1.mean(axis=0)
    if not (P0 > 0 and np.all(P1 > 0)):
        raise DomainError("zero channel power; correlation undefined")
    S = np.sqrt(P0 * P1)
    R = x.mean(axis=0) / S
    z = (x - x.mean(axis=0)) / S - 0.5 * R * ((p0[:, None] - P0) / P0 + (p1 - P1) / P1)
    phase = np.exp(-1j * np.angle(R))
    se_ = np.std((z * phase).real, axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(R.shape)
    return CorrelationResult(np.asarray(lags), R, se_, n, label, extra or {})


_streams = se.realization_streams


def _check_ensemble(ensemble_size: int):
    if ensemble_size < 1:
        raise ConfigError("ensemble_size must be >= 1")


def temporal_acf(scenario: StatsScenario, lags, ensemble_size: int, rng=None, *, t_ref: float = 0.0,
                 with_scattering: bool = True, birth_death: bool = True, moving: bool = True
                 ) -> CorrelationResult:
    """``E{tr H(t) H(t + lag)^H}`` normalised by the powers at both times, over environment realizations.

    Lags must be non-negative; the scene evolves by the birth-death process and
    the Rx sample translates with the scenario mobility.
    """
    return temporal_acf_intervals(scenario, lags, ensemble_size, rng, [scenario.delta], t_ref=t_ref,
                                  with_scattering=with_scattering, birth_death=birth_death,
                                  moving=moving)[scenario.delta]


def temporal_acf_intervals(scenario: StatsScenario, lags, ensemble_size: int, rng, deltas: Sequence[float], *,
                           t_ref: float = 0.0, with_scattering: bool = True, birth_death: bool = True,
                           moving: bool = True) -> dict[float, CorrelationResult]:
    """:func:`temporal_acf` for several sample intervals on the same realizations.

    The interval changes only the cell factor, so one MoM system per scene serves all of them.
    """
    _check_ensemble(ensemble_size)
    lags = np.asarray(lags, dtype=float)
    if np.any(lags < 0):
        raise DomainError("lags must be non-negative; use acf_pairs for mirrored lags")
    order = np.argsort(lags, kind="stable")
    grids = [replace(scenario, delta=d).grid() for d in deltas]
    idx = [scenario.tx_sample(gr) for gr in grids]
    r_n = grids[0].tx_points[idx[0]]
    if any(not np.array_equal(gr.tx_points[i], r_n) for gr, i in zip(grids, idx)):
        raise ConfigError("the Tx sample must be the same point for every interval")
    mob = scenario.mobility() if moving else Mobility((0.0, 0.0, 0.0))
    r0 = grids[0].rx_points[0]
    nd = len(grids)
    x = np.zeros((nd, ensemble_size, lags.size), complex)
    p = np.zeros((nd, ensemble_size))
    q = np.zeros((nd, ensemble_size, lags.size))
    for e, g in enumerate(_streams(rng, ensemble_size)):
        scene = se.draw_scene(scenario.params, scenario.geometry, g)
        if t_ref > 0 and birth_death:
            scene = se.evolve(scene, scenario.params, t_ref, 0.0, 0.0, g)
        models: dict[tuple[int, ...], ChannelModel] = {}

        def H_at(sc, t):
            scs = sc.alive if with_scattering else ()
            key = tuple(s.id for s in scs)
            if key not in models:
                models[key] = scenario.model(grids[0], scs)
            r = mob.position(r0, t)
            raw = models[key].raw_dyads(r, idx[0])[0]
            return [raw * cell_scale(gr, r, r_n, scenario.k)[0] for gr in grids]

        H0 = H_at(scene, t_ref)
        p[:, e] = [np.vdot(h, h).real for h in H0]
        cur, t_cur = scene, t_ref
        for i in order:
            t = t_ref + lags[i]
            if birth_death and t > t_cur:
                cur = se.evolve(cur, scenario.params, t - t_cur, 0.0, 0.0, g)
                t_cur = t
            for d, (h, h0) in enumerate(zip(H_at(cur, t), H0)):
                x[d, e, i] = np.vdot(h, h0)
                q[d, e, i] = np.vdot(h, h).real
    return {
        delta: _reduce(x[d], p[d], q[d], lags, f"acf t={t_ref} delta={delta}", {"x": x[d], "p0": p[d], "p1": q[d]})
        for d, delta in enumerate(deltas)
    }


def acf_pairs(scenario: StatsScenario, times, ensemble_size: int, rng=None, *, with_scattering: bool = True):
    """Two-time correlation matrix ``E{tr H(t_i) H(t_j)^H}`` normalised by the mean powers at both times.

    ``R[i, j] = conj(R[j, i])`` holds exactly, which makes mirrored lags consistent.
    """
    _check_ensemble(ensemble_size)
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0):
        raise DomainError("times must be sorted")
    grid = scenario.grid()
    n = scenario.tx_sample(grid)
    mob = scenario.mobility()
    r0 = grid.rx_points[0]
    acc = np.zeros((times.size, times.size), complex)
    for g in _streams(rng, ensemble_size):
        scene = se.draw_scene(scenario.params, scenario.geometry, g)
        t_cur = 0.0
        Hs = []
        for t in times:
            if t > t_cur:
                scene = se.evolve(scene, scenario.params, t - t_cur, 0.0, 0.0, g)
                t_cur = t
            scs = scene.alive if with_scattering else ()
            Hs.append(scenario.model(grid, scs).pair_dyads(mob.position(r0, t), n)[0])
        Hs = np.array(Hs)
        acc += np.einsum("iab,jab->ij", Hs, Hs.conj())
    d = np.sqrt(np.diag(acc).real)
    return acc / np.outer(d, d)


def spatial_ccf(scenario: StatsScenario, offsets, ensemble_size: int, rng=None, *,
                with_scattering: bool = True, direction=None) -> CorrelationResult:
    """``E{E(r_m) . E(r_m + dr)^*}`` normalised by the powers at both points, for the sampled source current.

    ``offsets`` are scalars along ``direction`` (default: the mobility
    direction) or explicit 3-vectors.
    """
    _check_ensemble(ensemble_size)
    off = np.asarray(offsets, dtype=float)
    if off.ndim == 1:
        d = np.asarray(direction if direction is not None else scenario.mobility().velocity, dtype=float)
        d = d / np.linalg.norm(d)
        dr = off[:, None] * d
        lag = off
    else:
        dr = off.reshape(-1, 3)
        lag = np.linalg.norm(dr, axis=1)
    grid = scenario.grid()
    r0 = grid.rx_points[0]
    pts = r0 + dr
    if not np.all(se.in_rx_region(scenario.geometry, pts)):
        raise DomainError("CCF offset leaves the receive region")
    J = np.broadcast_to(np.asarray(scenario.current, dtype=complex), (grid.N_t, 3))
    all_pts = np.vstack([r0[None], pts])
    x = np.zeros((ensemble_size, len(pts)), complex)
    p = np.zeros(ensemble_size)
    q = np.zeros((ensemble_size, len(pts)))
    free = None
    for e, g in enumerate(_streams(rng, ensemble_size)):
        scene = se.draw_scene(scenario.params, scenario.geometry, g)
        if with_scattering and scene.alive:
            E = scenario.model(grid, scene.alive).field(all_pts, J)
        else:
            if free is None:
                free = scenario.model(grid, ()).field(all_pts, J)
            E = free
        x[e] = E[1:].conj() @ E[0]  # E(r_m) . E(r_m + dr)^*
        p[e] = np.vdot(E[0], E[0]).real
        q[e] = np.sum(np.abs(E[1:]) ** 2, axis=1)
    return _reduce(x, p, q, lag, "ccf", {"x": x, "p0": p, "p1": q})


def free_space_ccf_modes(scenario: StatsScenario, operator: swf.RadiationOperator, offsets,
                         direction=None) -> np.ndarray:
    """Free-space CCF through the spherical-wave route: expand the sampled current, then radiate."""
    off = np.asarray(offsets, dtype=float)
    d = np.asarray(direction if direction is not None else scenario.mobility().velocity, dtype=float)
    d = d / np.linalg.norm(d)
    grid = scenario.grid()
    r0 = grid.rx_points[0]
    pts = np.vstack([r0[None], r0 + off[:, None] * d])
    J = np.asarray(scenario.current, dtype=complex)
    tx = grid.tx_points
    # radiated field of point currents: expansion coefficients are projections onto conj(v_p)
    v = operator.v(tx)  # (P, N_t, 3) Cartesian
    j = np.einsum("pnc,c->p", v.conj(), J) * grid.delta_t
    E = swf.radiate(j, pts, operator).to_cartesian().values
    E = E / (1j * operator.omega * operator.mu)
    x = E[1:].conj() @ E[0]
    return x / np.sqrt(np.vdot(E[0], E[0]).real * np.sum(np.abs(E[1:]) ** 2, axis=1))


# --------------------------------------------------------------------------- patterns


@dataclass
class RadiationPattern:
    angles: np.ndarray
    E_r: np.ndarray
    E_theta: np.ndarray
    E_phi: np.ndarray
    cut: str
    radius: float


def radiation_pattern(j, operator: swf.RadiationOperator, cut: Literal["theta_cut", "phi_cut"] = "theta_cut",
                      resolution: int = 361, *, radius: float | None = None, fixed_angle: float | None = None
                      ) -> RadiationPattern:
    """Field magnitudes on a great-circle cut at a large radius.

    ``theta_cut`` sweeps theta in ``[0, pi]`` at ``phi = fixed_angle`` (default 0);
    ``phi_cut`` sweeps phi in ``[0, 2 pi)`` at ``theta = fixed_angle`` (default pi/2).
    The default radius is 100 wavelengths beyond the far edge of the receive region.
    """
    lam = 2 * np.pi / operator.k
    g = operator.geometry
    R = g.D + g.R_r + 100 * lam if radius is None else radius
    if cut == "theta_cut":
        ang = np.linspace(0.0, np.pi, resolution)
        th, ph = ang, np.full_like(ang, 0.0 if fixed_angle is None else fixed_angle)
    elif cut == "phi_cut":
        ang = np.linspace(0.0, 2 * np.pi, resolution, endpoint=False)
        th, ph = np.full_like(ang, np.pi / 2 if fixed_angle is None else fixed_angle), ang
    else:
        raise ConfigError(f"unknown cut {cut!r}")
    pts = swf.sph_to_cart(R, th, ph)
    E = swf.radiate(j, pts, operator).values
    a = np.abs(E)
    return RadiationPattern(ang, a[:, 0], a[:, 1], a[:, 2], cut, R)


def with_delta(scenario: StatsScenario, delta: float) -> StatsScenario:
    return replace(scenario, delta=delta)
