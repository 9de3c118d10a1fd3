"""Transmit-current optimisation in the mode domain.

The received signal of user ``k`` is ``y_k = b_k^T j`` with
``b_k[p] = sigma_p (w_k . u_p(r_k))`` (spherical components about the source
centre). With scatterers present the MoM response is linear in ``j``, so
``y = (B + L) j`` where ``L`` maps mode coefficients to the polarised
scattered field at the users.
"""

from __future__ import annotations

import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import scatter, swf
from .errors import ConfigError, ConvergenceError, DomainError
from .swf import RadiationOperator

DEFAULT_W = np.full(3, 1.0 / np.sqrt(3.0), dtype=complex)


@dataclass(frozen=True, eq=False)
class UserTarget:
    """User at Cartesian ``position`` with desired symbol and polarisation gains ``(w_r, w_theta, w_phi)``."""

    position: np.ndarray
    symbol: complex = 1.0 + 0.0j
    w: np.ndarray = field(default_factory=lambda: DEFAULT_W.copy())

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "w", np.asarray(self.w, dtype=complex).reshape(3))
        if not np.any(self.w != 0):
            raise DomainError("polarisation gain vector must be nonzero")


def make_users(positions, symbols=None, w=None) -> list[UserTarget]:
    pos = np.atleast_2d(np.asarray(positions, dtype=float)).reshape(-1, 3)
    sym = np.ones(len(pos), complex) if symbols is None else np.asarray(symbols, dtype=complex).ravel()
    ww = DEFAULT_W if w is None else np.asarray(w, dtype=complex)
    ww = np.broadcast_to(ww, (len(pos), 3))
    return [UserTarget(p, complex(s), wk) for p, s, wk in zip(pos, sym, ww)]


def random_symbols(K: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-modulus symbols with phase uniform on ``[0, 2 pi)``."""
    return np.exp(2j * np.pi * rng.uniform(size=K))


def _positions(users: Sequence[UserTarget]) -> np.ndarray:
    return np.array([u.position for u in users]).reshape(-1, 3)


def _weights(users: Sequence[UserTarget]) -> np.ndarray:
    return np.array([u.w for u in users]).reshape(-1, 3)


def symbols_of(users: Sequence[UserTarget]) -> np.ndarray:
    return np.array([u.symbol for u in users], dtype=complex)


def _check_P(P: int, operator: RadiationOperator):
    if not 1 <= P <= operator.P_max:
        raise ConfigError(f"SVD order P={P} outside [1, {operator.P_max}]")


def build_beam_vectors(users: Sequence[UserTarget], operator: RadiationOperator, P: int) -> np.ndarray:
    """Rows ``b_k`` of length ``P``; shape ``(K, P)``."""
    _check_P(P, operator)
    if not users:
        return np.zeros((0, P), dtype=complex)
    u = operator.u(_positions(users), P)  # (P, K, 3) spherical
    return np.einsum("pkc,kc->kp", u, _weights(users)) * operator.sigma[:P]


# --------------------------------------------------------------------------- P1


@dataclass
class P1Result:
    """Regularised least-squares current with its KKT multiplier."""

    j: np.ndarray
    lam: float
    power: float
    P_T: float
    err: float
    constrained: bool

    def kkt(self, B: np.ndarray, s: np.ndarray) -> dict[str, float]:
        """Stationarity residual (relative) and complementary slackness (absolute)."""
        G = B.conj().T @ B
        rhs = B.conj().T @ s
        stat = np.linalg.norm(G @ self.j + self.lam * self.j - rhs)
        scale = np.linalg.norm(rhs)
        return {
            "lambda": self.lam,
            "stationarity": float(stat / scale) if scale > 0 else float(stat),
            "slackness": float(abs(self.lam * (self.power - self.P_T))),
            "primal": float(max(self.power - self.P_T, 0.0)),
        }


def _err(B: np.ndarray, j: np.ndarray, s: np.ndarray) -> float:
    den = np.sum(np.abs(s) ** 2)
    return float(np.sum(np.abs(B @ j - s) ** 2) / den) if den > 0 else 0.0


def solve_p1(B: np.ndarray, s, P_T: float, tol_lam: float = 1e-10, max_bisect: int = 400) -> P1Result:
    """Minimise ``sum_k |b_k^T j - s_k|^2`` subject to ``||j||^2 <= P_T``.

    The solution is ``(B^H B + lam I)^{-1} B^H s``; ``lam`` is found by
    bisection once the unconstrained (minimum-norm) solution exceeds ``P_T``.
    ``tol_lam`` bounds ``| ||j||^2 - P_T |`` relative to ``P_T``.
    """
    B = np.atleast_2d(np.asarray(B, dtype=complex))
    s = np.asarray(s, dtype=complex).ravel()
    if not P_T > 0:
        raise DomainError("P_T must be positive")
    if not (np.all(np.isfinite(B)) and np.all(np.isfinite(s))):
        raise DomainError("non-finite beam vectors or symbols")
    K, P = B.shape
    if K == 0:
        return P1Result(np.zeros(P, complex), 0.0, 0.0, P_T, 0.0, False)
    if K > P:
        warnings.warn(f"K={K} users exceed SVD order P={P}; exact recovery impossible", stacklevel=2)
    U, S, Vh = np.linalg.svd(B, full_matrices=False)
    c = U.conj().T @ s
    keep = S > S[0] * max(K, P) * np.finfo(float).eps if S.size and S[0] > 0 else np.zeros(S.shape, bool)

    def coeffs(lam: float) -> np.ndarray:
        d = np.zeros_like(S)
        d[keep] = S[keep] / (S[keep] ** 2 + lam)
        return d * c

    def power(lam: float) -> float:
        return float(np.sum(np.abs(coeffs(lam)) ** 2))

    lam = 0.0
    if power(0.0) > P_T:
        lo, hi = 0.0, max(S[0] ** 2, 1e-300)
        while power(hi) >= P_T:
            lo, hi = hi, 2 * hi
        # invariant: power(lo) > P_T >= power(hi); hi is always feasible
        for _ in range(max_bisect):
            if P_T - power(hi) <= tol_lam * P_T or (lo > 0 and hi / lo - 1.0 < 1e-15):
                break
            mid = 0.5 * (lo + hi) if lo == 0.0 else np.sqrt(lo * hi)
            if power(mid) > P_T:
                lo = mid
            else:
                hi = mid
        lam = hi
    j = Vh.conj().T @ coeffs(lam)
    pw = float(np.vdot(j, j).real)
    return P1Result(j, float(lam), pw, P_T, _err(B, j, s), lam > 0)


# --------------------------------------------------------------------------- scattering response


@dataclass
class ScatteringResponse:
    """Linear map ``j -> `` polarised scattered field at the users, built on one MoM system."""

    system: scatter.MoMSystem
    L: np.ndarray
    P: int

    @classmethod
    def build(cls, scene, users: Sequence[UserTarget], operator: RadiationOperator, P: int, D: int = 16,
              N_s: int = 64, basis: scatter.BasisKind = "full") -> ScatteringResponse:
        _check_P(P, operator)
        sys_ = scatter.assemble(scene, operator.k, D, N_s, basis, omega=operator.omega, mu=operator.mu)
        K = len(users)
        if not sys_.scatterers or K == 0:
            return cls(sys_, np.zeros((K, P), complex), P)
        E = incident_mode_fields(operator, sys_.match_points, P)  # (npts, 3, P)
        T = sys_.tangential(E, sys_.match_frames)
        X = -(sys_.col_scale[:, None] * (sys_.pinv @ T))  # coefficients per unit j_p
        pos = _positions(users)
        F = sys_.field_matrix(pos)  # (K, 3, QD) Cartesian
        _, th, ph = swf.cart_to_sph(pos)
        R = swf.spherical_basis(th, ph)  # (K, 3, 3) rows r, theta, phi
        proj = np.einsum("kc,kci->ki", _weights(users), R)
        Sw = np.einsum("ki,kiq->kq", proj, F)
        return cls(sys_, Sw @ X, P)

    def coefficients(self, j: np.ndarray, operator: RadiationOperator) -> np.ndarray:
        E = incident_mode_fields(operator, self.system.match_points, self.P) @ np.asarray(j, complex)[: self.P]
        return self.system.solve_coefficients(E)


def incident_mode_fields(operator: RadiationOperator, points, P: int) -> np.ndarray:
    """Cartesian ``sigma_p u_p`` at ``points``; shape ``(npts, 3, P)``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] == 0:
        return np.zeros((0, 3, P), complex)
    u = swf.to_cartesian_fields(operator.u(pts, P), pts) * operator.sigma[:P, None, None]
    return np.moveaxis(u, 0, -1)


# --------------------------------------------------------------------------- P2


@dataclass
class P2Result:
    j: np.ndarray
    iterations: int
    err_trace: list[float]
    change_trace: list[float]
    converged: bool
    err: float
    blind_j: np.ndarray
    blind_err: float
    lam: float


def signal_error(j, users: Sequence[UserTarget], operator: RadiationOperator, response: ScatteringResponse | None = None) -> float:
    """``sum_k |y_k - s_k|^2 / sum_k |s_k|^2`` with the direct field plus optional scattering."""
    j = np.asarray(j, dtype=complex).ravel()
    if not users:
        return 0.0
    B = build_beam_vectors(users, operator, j.size)
    if response is not None:
        B = B + response.L[:, : j.size]
    return _err(B, j, symbols_of(users))


def solve_p2(scene, users: Sequence[UserTarget], operator: RadiationOperator, P: int, P_T: float,
             eps1: float = 1e-3, max_iter: int = 20, *, D: int = 16, N_s: int = 64,
             basis: scatter.BasisKind = "full", response: ScatteringResponse | None = None,
             raise_on_failure: bool = True, method: str = "fixed_point") -> P2Result:
    """Fixed-point retargeting: solve P1 against ``s - E_s(j_prev)`` until ``j`` stops moving.

    The stopping rule is ``||j_i - j_{i-1}|| < eps1 ||j_{i-1}||``. The fixed
    point is in general not the minimiser of the scatter-aware error;
    ``method="direct"`` solves P1 on ``B + L`` in one step instead.
    """
    if method not in ("fixed_point", "direct"):
        raise ConfigError(f"unknown P2 method {method!r}")
    B = build_beam_vectors(users, operator, P)
    s = symbols_of(users)
    resp = ScatteringResponse.build(scene, users, operator, P, D, N_s, basis) if response is None else response
    L = resp.L[:, :P]
    first = solve_p1(B, s, P_T)
    if method == "direct":
        d = solve_p1(B + L, s, P_T)
        return P2Result(d.j, 1, [_err(B + L, first.j, s), d.err], [], True, d.err, first.j,
                        _err(B + L, first.j, s), d.lam)
    j = first.j
    err_trace = [_err(B + L, j, s)]
    change_trace: list[float] = []
    converged = not np.any(L)
    lam = first.lam
    it = 0
    while not converged and it < max_iter:
        it += 1
        res = solve_p1(B, s - L @ j, P_T)
        change = np.linalg.norm(res.j - j) / max(np.linalg.norm(j), np.finfo(float).tiny)
        j, lam = res.j, res.lam
        err_trace.append(_err(B + L, j, s))
        change_trace.append(float(change))
        converged = change < eps1
    if not converged and raise_on_failure:
        raise ConvergenceError(f"P2 iteration did not converge in {max_iter} rounds", err_trace)
    return P2Result(j, max(it, 1), err_trace, change_trace, converged, err_trace[-1],
                    first.j, err_trace[0], lam)


# --------------------------------------------------------------------------- SVD order sweep


@dataclass
class SweepRow:
    P: int
    err: float
    power: float
    lam: float


def sweep_svd_order(users: Sequence[UserTarget], operator: RadiationOperator, P_range, P_T: float) -> list[SweepRow]:
    """P1 optimum for each SVD order in ``P_range`` (modes taken in index order)."""
    P_list = [int(p) for p in P_range]
    if not P_list:
        return []
    Pmax = max(P_list)
    _check_P(Pmax, operator)
    B = build_beam_vectors(users, operator, Pmax)
    s = symbols_of(users)
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for P in P_list:
            r = solve_p1(B[:, :P], s, P_T)
            rows.append(SweepRow(P, r.err, r.power, r.lam))
    return rows


# --------------------------------------------------------------------------- P3


@dataclass
class PowerAllocation:
    power: np.ndarray
    water_level: float
    dof: int

    def capacity(self, sigma, N: float = 1.0) -> float:
        sigma = np.asarray(sigma, dtype=float)
        return float(np.sum(np.log2(1.0 + sigma**2 * self.power / N)))


def water_fill(sigma, P_T: float, N: float = 1.0) -> PowerAllocation:
    """``|j_p|^2 = max(wl - N / sigma_p^2, 0)`` with the budget met exactly."""
    sigma = np.abs(np.asarray(sigma, dtype=float).ravel())
    if np.any(sigma <= 0) or N <= 0 or P_T < 0:
        raise DomainError("water filling needs sigma > 0, N > 0 and P_T >= 0")
    if P_T == 0 or sigma.size == 0:
        return PowerAllocation(np.zeros(sigma.size), 0.0, 0)
    floor = N / sigma**2
    order = np.argsort(floor, kind="stable")
    f = floor[order]
    csum = np.cumsum(f)
    m = np.arange(1, f.size + 1)
    levels = (P_T + csum) / m
    # largest active set whose level stays above its own highest floor
    active = int(np.nonzero(levels > f)[0].max()) + 1
    wl = float(levels[active - 1])
    power = np.maximum(wl - floor, 0.0)
    power *= P_T / power.sum()
    return PowerAllocation(power, wl, int(np.count_nonzero(power > 0)))
