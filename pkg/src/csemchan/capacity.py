"""Single-user water-filling capacity and multi-user capacity with and without precoding.

Powers are in watts with the noise power ``N`` normalised to 1 by default;
:func:`dbm_to_watts` converts sweep values given in dBm.
"""

from __future__ import annotations

import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import channel_stats as cs, optim, stochastic_env as se, swf
from .green import dyadic_green
from .errors import ConfigError, CsemError, DomainError
from .swf import RadiationOperator

Precoder = Literal["mmse", "slnr"]


def dbm_to_watts(dbm) -> np.ndarray:
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def watts_to_dbm(w) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(np.asarray(w, dtype=float)) + 30.0


@dataclass
class CapacityReport:
    """Capacity (bits/s/Hz) per transmit power, with Monte-Carlo standard errors.

    ``samples`` holds the per-realization capacities (rows) when an ensemble was run.
    """

    P_T: np.ndarray
    capacity: np.ndarray
    stderr: np.ndarray
    ensemble_size: int
    dof: np.ndarray | None = None
    tags: dict = field(default_factory=dict)
    samples: np.ndarray | None = None

    def __post_init__(self):
        if np.any(self.capacity < 0):
            raise DomainError("negative capacity")

    @property
    def P_T_dBm(self) -> np.ndarray:
        return watts_to_dbm(self.P_T)

    def rows(self) -> list[dict]:
        out = []
        for i, p in enumerate(self.P_T):
            row = {"P_T_dBm": float(self.P_T_dBm[i]), "P_T_W": float(p), "capacity": float(self.capacity[i]),
                   "stderr": float(self.stderr[i])}
            if self.dof is not None:
                row["dof"] = int(self.dof[i])
            row.update({k: v for k, v in self.tags.items() if np.isscalar(v) or isinstance(v, str)})
            out.append(row)
        return out


def _summarise(samples: np.ndarray, P_T: np.ndarray, tags: dict) -> CapacityReport:
    n = samples.shape[0]
    mean = samples.mean(axis=0) if n else np.zeros(P_T.size)
    se_ = samples.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(P_T.size)
    return CapacityReport(P_T, mean, se_, n, None, tags, samples)


def _powers(P_T) -> np.ndarray:
    p = np.atleast_1d(np.asarray(P_T, dtype=float))
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise DomainError("transmit powers must be finite and non-negative")
    return p


def _check_noise(N: float):
    if not N > 0:
        raise DomainError("noise power must be positive")


# --------------------------------------------------------------------------- single user


def single_user_capacity(operator: RadiationOperator, P_T, N: float = 1.0, P: int | None = None) -> CapacityReport:
    """Water-filling capacity over the modal channel gains ``sigma_p``; DoF is the active mode count."""
    _check_noise(N)
    p = _powers(P_T)
    sigma = np.abs(operator.sigma[: operator.P_max if P is None else P])
    caps, dofs = [], []
    for pt in p:
        alloc = optim.water_fill(sigma, float(pt), N)
        caps.append(alloc.capacity(sigma, N))
        dofs.append(alloc.dof)
    return CapacityReport(p, np.array(caps), np.zeros(p.size), 1, np.array(dofs), {"variant": "single-user"})


# --------------------------------------------------------------------------- multi user


@dataclass(frozen=True)
class MultiUserScenario:
    """Users, scatterer statistics and solver settings for the multi-user estimators.

    The precoded variant builds user rows from the first ``P`` modes
    (``rows="modes"``: ``b_k`` plus the scattering response) or from Tx
    samples at interval ``delta`` (``rows="samples"``, default half a
    wavelength). ``efficiency`` scales its transmit power.
    """

    operator: RadiationOperator
    K: int = 10
    P: int = 30
    params: se.EnvParams = field(default_factory=se.EnvParams)
    w: tuple[float, float, float] = tuple(optim.DEFAULT_W)
    D: int = 16
    N_s: int = 64
    basis: str = "full"
    method: str = "fixed_point"
    eps1: float = 1e-3
    max_iter: int = 20
    delta: float | None = None
    efficiency: float = 1.0
    user_fill: float = 1.0
    rows: Literal["modes", "samples"] = "modes"
    user_positions: tuple[tuple[float, float, float], ...] | None = None

    def __post_init__(self):
        if self.K < 0:
            raise ConfigError("K must be non-negative")
        if self.rows not in ("modes", "samples"):
            raise ConfigError(f"unknown row model {self.rows!r}")
        if not 0 < self.efficiency <= 1:
            raise ConfigError("efficiency must lie in (0, 1]")
        if self.user_positions is not None:
            pos = np.asarray(self.user_positions, dtype=float).reshape(-1, 3)
            if len(pos) != self.K:
                raise ConfigError(f"user_positions lists {len(pos)} points for K={self.K}")
            if not np.all(se.in_rx_region(self.geometry, pos)):
                raise ConfigError("user_positions must lie in the receive region")

    @property
    def geometry(self) -> swf.Geometry:
        return self.operator.geometry

    @property
    def sample_interval(self) -> float:
        return np.pi / self.operator.k if self.delta is None else self.delta

    def draw(self, rng: np.random.Generator):
        """Scene with ``K`` users (fixed or random) and their random unit-modulus symbols."""
        if self.user_positions is None:
            users_pos = se.draw_users(self.geometry, self.K, rng, self.user_fill)
        else:
            users_pos = np.asarray(self.user_positions, dtype=float).reshape(-1, 3)
        scene = se.draw_scene(self.params, self.geometry, rng, users=users_pos)
        users = optim.make_users(users_pos, optim.random_symbols(self.K, rng), self.w)
        return scene, users


def _tag_failure(e: CsemError, i: int) -> CsemError:
    e.args = (f"realization {i}: {e.args[0] if e.args else ''}",) + tuple(e.args[1:])
    e.realization = i
    return e


def per_user_rates(y, N: float) -> np.ndarray:
    """``log2(1 + |y_k|^2 / N)`` per user."""
    return np.log2(1.0 + np.abs(np.asarray(y)) ** 2 / N)


def multi_user_capacity(scenario: MultiUserScenario, P_T, N: float = 1.0, ensemble_size: int = 1, rng=None,
                        with_scattering: bool = True) -> CapacityReport:
    """Mean over users, symbols and scenes of ``sum_k log2(1 + |y_k|^2 / N)``.

    ``y_k`` is the polarised received field of the optimised current: P1 on
    the free-space beam vectors without scattering, the P2 iteration with it.
    """
    _check_noise(N)
    if ensemble_size < 1:
        raise ConfigError("ensemble_size must be >= 1")
    p = _powers(P_T)
    samples = np.zeros((ensemble_size, p.size))
    unconverged = 0
    for i, g in enumerate(se.realization_streams(rng, ensemble_size)):
        scene, users = scenario.draw(g)
        try:
            samples[i], u = realization_rates(scenario, scene, users, p, N, with_scattering)
        except CsemError as e:
            raise _tag_failure(e, i) from e
        unconverged += u
    tags = {"variant": "multi-user", "scattering": bool(with_scattering), "K": scenario.K, "P": scenario.P,
            "unconverged": unconverged}
    return _summarise(samples, p, tags)


def realization_rates(scenario: MultiUserScenario, scene, users: Sequence[optim.UserTarget], P_T, N: float = 1.0,
                      with_scattering: bool = True) -> tuple[np.ndarray, int]:
    """Sum rate of one fixed scene per entry of ``P_T`` and the count of unconverged P2 runs."""
    p = _powers(P_T)
    out = np.zeros(p.size)
    if len(users) == 0:
        return out, 0
    op, P = scenario.operator, scenario.P
    B = optim.build_beam_vectors(users, op, P)
    s = optim.symbols_of(users)
    resp = None
    if with_scattering and scene.alive:
        resp = optim.ScatteringResponse.build(scene, users, op, P, scenario.D, scenario.N_s, scenario.basis)
    unconverged = 0
    for t, pt in enumerate(p):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            if resp is None:
                y = B @ optim.solve_p1(B, s, pt).j
            else:
                r = optim.solve_p2(scene, users, op, P, pt, scenario.eps1, scenario.max_iter,
                                   response=resp, raise_on_failure=False, method=scenario.method)
                unconverged += not r.converged
                y = (B + resp.L) @ r.j
        out[t] = per_user_rates(y, N).sum()
    return out, unconverged


# --------------------------------------------------------------------------- precoding


def mode_rows(scenario: MultiUserScenario, scene, users: Sequence[optim.UserTarget],
              with_scattering: bool = True) -> np.ndarray:
    """``(K, P)`` user rows ``b_k`` (plus the linear scattering response) over the mode coefficients."""
    op, P = scenario.operator, scenario.P
    B = optim.build_beam_vectors(users, op, P)
    if with_scattering and scene.alive:
        B = B + optim.ScatteringResponse.build(scene, users, op, P, scenario.D, scenario.N_s, scenario.basis).L
    return B


def channel_rows(scenario: MultiUserScenario, scene, users: Sequence[optim.UserTarget],
                 with_scattering: bool = True, block: int = 128) -> np.ndarray:
    """``(K, 3 N_t)`` user rows over the sampled Tx current.

    With ``x_n = sqrt(delta_t) J_n`` the precoder power ``||x||^2`` equals the
    current norm used by the modal budget, and ``h_k x`` is the polarised
    received field.
    """
    op = scenario.operator
    pos = optim._positions(users)
    grid = cs.SampleGrid.build(scenario.geometry, scenario.sample_interval, rx_points=pos)
    scs = scene.alive if with_scattering else ()
    model = cs.ChannelModel(grid, op.k, scs, D=scenario.D, N_s=scenario.N_s, basis=scenario.basis,
                            omega=op.omega, mu=op.mu)
    _, th, ph = swf.cart_to_sph(pos)
    a = np.einsum("kc,kci->ki", optim._weights(users), swf.spherical_basis(th, ph))  # Cartesian receive weights
    tx = grid.tx_points
    K, Nt = pos.shape[0], tx.shape[0]
    rows = np.zeros((K, Nt, 3), complex)
    F = model.system.field_matrix(pos) if model.has_scattering else None
    for s0 in range(0, Nt, block):
        idx = np.arange(s0, min(s0 + block, Nt))
        G = model._direct(pos[:, None, :] + 0 * tx[None, idx], np.broadcast_to(tx[idx], (K, idx.size, 3)))
        if F is not None:
            sys_ = model.system
            mp = sys_.match_points
            Gm = _green_columns(mp, tx[idx], op.k)
            T = sys_.tangential(Gm.reshape(mp.shape[0], 3, -1), sys_.match_frames)  # cols ordered (b, c)
            X = -(sys_.col_scale[:, None] * (sys_.pinv @ T))
            S = (F @ X).reshape(K, 3, idx.size, 3).transpose(0, 2, 1, 3)
            G = G + S
        fac = cs._cell_factor(pos[:, None, :], tx[None, idx], op.k, grid.tx_lengths)
        rows[:, idx] = np.einsum("ki,knic->knc", a, G) * fac[..., None]
    scale = 1j * op.omega * op.mu * np.sqrt(grid.delta_t)
    return (rows * scale).reshape(K, 3 * Nt)


def _green_columns(points, sources, k: float) -> np.ndarray:
    """Free-space dyads as ``(npts, 3, nsrc, 3)``; a reshape orders columns as (source, component)."""
    return dyadic_green(points[:, None, :], sources[None, :, :], k).transpose(0, 2, 1, 3)


def _per_user_power(W: np.ndarray, P_T: float) -> np.ndarray:
    n = np.linalg.norm(W, axis=0)
    return W * np.where(n > 0, np.sqrt(P_T / W.shape[1]) / np.where(n > 0, n, 1.0), 0.0)


def precoder(H: np.ndarray, P_T: float, N: float = 1.0, kind: Precoder = "mmse",
             power: Literal["global", "per_user"] = "global") -> np.ndarray:
    """Precoding matrix ``W`` (``M x K``, column ``k`` serves user ``k``) with ``||W||_F^2 = P_T``.

    ``mmse`` is the regularised pseudo-inverse with regulariser ``K N / P_T``,
    scaled by one global factor (``power="global"``) or to ``P_T / K`` per
    column. ``slnr`` takes for each user the leading generalised eigenvector
    of its signal matrix against leakage plus noise, with ``P_T / K`` per user.
    With per-column scaling the two coincide: both directions are
    ``(H^H H + K N / P_T I)^{-1} h_k^H`` up to a scalar.
    """
    K, M = H.shape
    if K == 0 or P_T == 0:
        return np.zeros((M, K), complex)
    reg = K * N / P_T
    if kind == "mmse":
        W = H.conj().T @ np.linalg.solve(H @ H.conj().T + reg * np.eye(K), np.eye(K))
        if power == "per_user":
            return _per_user_power(W, P_T)
        nrm = np.linalg.norm(W)
        return W * (np.sqrt(P_T) / nrm) if nrm > 0 else W
    if kind != "slnr":
        raise ConfigError(f"unknown precoder {kind!r}")
    W = np.zeros((M, K), complex)
    for k in range(K):
        Hk = np.delete(H, k, axis=0)
        # the leading generalised eigenvector is (Hk^H Hk + reg I)^{-1} h_k^H; push-through keeps it K x K
        if Hk.shape[0]:
            inner = Hk @ Hk.conj().T + reg * np.eye(K - 1)
            if not np.isfinite(np.linalg.cond(inner)) or np.linalg.cond(inner) > 1e14:
                warnings.warn("leakage matrix near singular; adding diagonal loading", RuntimeWarning, stacklevel=2)
                inner = inner + 1e-12 * np.trace(inner).real * np.eye(K - 1)
            h = H[k].conj()
            v = (h - Hk.conj().T @ np.linalg.solve(inner, Hk @ h)) / reg
        else:
            v = H[k].conj()
        n = np.linalg.norm(v)
        W[:, k] = v * (np.sqrt(P_T / K) / n) if n > 0 else 0.0
    return W


def sinr(H: np.ndarray, W: np.ndarray, N: float = 1.0, interference: bool = True) -> np.ndarray:
    """Per-user ``|h_k w_k|^2 / (sum_{u != k} |h_k w_u|^2 + N)``; without interference the sum is dropped."""
    G = np.abs(H @ W) ** 2
    sig = np.diag(G).copy()
    leak = G.sum(axis=1) - sig if interference else 0.0
    return sig / (leak + N)


def multi_user_capacity_precoded(scenario: MultiUserScenario, precoder_kind: Precoder, P_T, N: float = 1.0,
                                 ensemble_size: int = 1, rng=None, with_scattering: bool = True) -> CapacityReport:
    """Ensemble mean of ``sum_k log2(1 + SINR_k)`` with MMSE or SLNR precoding over the sampled channel."""
    _check_noise(N)
    if ensemble_size < 1:
        raise ConfigError("ensemble_size must be >= 1")
    if precoder_kind not in ("mmse", "slnr"):
        raise ConfigError(f"unknown precoder {precoder_kind!r}")
    p = _powers(P_T)
    samples = np.zeros((ensemble_size, p.size))
    for i, g in enumerate(se.realization_streams(rng, ensemble_size)):
        scene, users = scenario.draw(g)
        if scenario.K == 0:
            continue
        try:
            if scenario.rows == "modes":
                H = mode_rows(scenario, scene, users, with_scattering)
            else:
                H = channel_rows(scenario, scene, users, with_scattering)
        except CsemError as e:
            raise _tag_failure(e, i) from e
        for t, pt in enumerate(p):
            W = precoder(H, scenario.efficiency * pt, N, precoder_kind)
            samples[i, t] = np.log2(1.0 + sinr(H, W, N)).sum()
    tags = {"variant": "precoded", "precoder": precoder_kind, "scattering": bool(with_scattering),
            "rows": scenario.rows, "sample_interval": scenario.sample_interval, "efficiency": scenario.efficiency, "K": scenario.K}
    return _summarise(samples, p, tags)
