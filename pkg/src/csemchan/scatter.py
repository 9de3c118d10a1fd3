"""Point-matched method of moments for perfectly conducting spheres.

Each sphere ``q`` carries a surface current expanded in ``D`` basis functions
built from regular spherical waves about its centre:

* ``basis="te"``: ``B_d = V_{2d-1}`` (TE modes only).
* ``basis="full"``: ``B_d`` = tangential part of ``V_d`` (TE and TM interleaved).

The field radiated by ``B_d`` on a sphere of radius ``a`` has the closed form
``-omega mu k a^2 R_l(ka)^2 U_p(r - c)`` outside the sphere, with
``R_1 = j_n`` and ``R_2 = (x j_n)' / x``. The direct surface quadrature of the
dyadic kernel is kept as an independent route (``method="quadrature"``).
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy import constants as _const
from scipy.spatial.transform import Rotation

from . import green, specfun, swf
from .errors import DomainError, IllConditionedError, PreconditionError

BasisKind = Literal["full", "te"]
FieldFn = Callable[[np.ndarray], np.ndarray]

# fixed rotation separating the held-out layout from the matching layout
_HOLDOUT_ROTATION = Rotation.from_euler("zyz", [0.61, 1.13, 2.29]).as_matrix()


@dataclass(frozen=True)
class Scatterer:
    """Perfectly conducting sphere; ``id`` survives birth-death evolution."""

    center: tuple[float, float, float]
    radius: float
    id: int = 0
    alive: bool = True

    def __post_init__(self):
        if not self.radius > 0:
            raise DomainError("scatterer radius must be positive")

    @property
    def c(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float)


def fibonacci_sphere(n: int, rotation: np.ndarray | None = None) -> np.ndarray:
    """``n`` quasi-uniform unit vectors (golden-angle spiral), optionally rotated."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    s = np.sqrt(1.0 - z * z)
    pts = np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)
    return pts if rotation is None else pts @ rotation.T


def basis_modes(D: int, basis: BasisKind) -> np.ndarray:
    """Global mode indices ``p`` used by the ``D`` basis functions."""
    if D < 1:
        raise DomainError("basis size must be >= 1")
    if basis == "te":
        return 2 * np.arange(1, D + 1) - 1
    if basis == "full":
        return np.arange(1, D + 1)
    raise DomainError(f"unknown basis {basis!r}")


def _radial_factor(n: np.ndarray, l: np.ndarray, ka: float) -> np.ndarray:  # noqa: E741
    nmax = int(n.max())
    j = specfun.spherical_jn_table(nmax, ka)
    dj = specfun.spherical_jn_derivative(nmax, ka)
    return np.where(l == 1, j[n], j[n] / ka + dj[n])


def _tangent_frames(normals: np.ndarray) -> np.ndarray:
    """Local ``(theta_hat, phi_hat)`` per outward normal; shape ``(npts, 2, 3)``."""
    _, th, ph = swf.cart_to_sph(normals)
    return swf.spherical_basis(th, ph)[:, 1:, :]


def _scatterers_of(scene) -> list[Scatterer]:
    scs = scene.scatterers if hasattr(scene, "scatterers") else scene
    return [s for s in scs if s.alive]


def _check_outside(points: np.ndarray, sc: Scatterer, rel_tol: float = 1e-9):
    d = np.linalg.norm(points - sc.c, axis=-1)
    if np.any(d < sc.radius * (1 - rel_tol)):
        raise DomainError(f"field point inside scatterer {sc.id}")


def basis_fields(
    sc: Scatterer,
    points,
    k: float,
    D: int,
    basis: BasisKind = "full",
    *,
    method: Literal["expansion", "quadrature"] = "expansion",
    omega: float | None = None,
    mu: float = _const.mu_0,
    n_quad: int | None = None,
) -> np.ndarray:
    """Fields of all ``D`` basis currents of ``sc`` at ``points``; ``(D, npts, 3)`` Cartesian."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    omega = k * _const.c if omega is None else omega
    modes = basis_modes(D, basis)
    nt = swf._truncation_for(int(modes.max()))
    n_arr, _, l_arr = swf.mode_arrays(nt)
    n_sel, l_sel = n_arr[modes - 1], l_arr[modes - 1]
    a = sc.radius
    if method == "expansion":
        _check_outside(pts, sc)
        rel = pts - sc.c
        U = swf.mode_fields(nt, k, rel, "h", modes=modes)
        coef = -omega * mu * k * a * a * _radial_factor(n_sel, l_sel, k * a) ** 2
        return swf.to_cartesian_fields(U * coef[:, None, None], rel)
    if method != "quadrature":
        raise DomainError(f"unknown method {method!r}")
    n_t = n_quad if n_quad is not None else nt + 8
    th, ph, w = specfun.sphere_quadrature(n_t, 2 * n_t)
    rhat = swf.sph_to_cart(1.0, th, ph)
    V = swf.mode_fields(nt, k, a * rhat, "j", modes=modes)
    V[:, :, 0] = 0.0  # tangential part only
    B = swf.to_cartesian_fields(V, rhat)
    src = sc.c + a * rhat
    out = np.empty((modes.size,) + pts.shape, dtype=complex)
    for d in range(modes.size):
        out[d] = green.radiated_field_integral(
            B[d], src, a * a * w, pts, k, omega=omega, mu=mu, min_clearance=a
        )
    return out


def basis_field(sc: Scatterer, d: int, r_field, k: float, D: int | None = None, basis: BasisKind = "full", **kw):
    """Field of basis function ``d`` (1-based) of ``sc`` as a Cartesian :class:`ComplexVec3`."""
    if d < 1:
        raise DomainError("basis index starts at 1")
    pts = np.atleast_2d(np.asarray(r_field, dtype=float))
    f = basis_fields(sc, pts, k, d if D is None else D, basis, **kw)[d - 1]
    return swf.ComplexVec3(f, "cartesian", pts)


@dataclass
class SurfaceCurrentSolution:
    """Solved MoM coefficients ``(Q, D)`` plus held-out boundary-condition residual."""

    coefficients: np.ndarray
    scatterer_ids: tuple[int, ...]
    D: int
    basis: BasisKind
    residual: float
    incident_scale: float
    condition: float
    n_match: int
    n_holdout: int

    @property
    def residual_rel(self) -> float:
        return self.residual / self.incident_scale if self.incident_scale > 0 else 0.0


@dataclass
class MoMSystem:
    """Assembled point-matching system for a fixed set of scatterers.

    The pseudo-inverse is computed once, so repeated solves for different
    incident fields (as in the outer optimisation loop) are matrix products.
    """

    scatterers: list[Scatterer]
    k: float
    D: int
    basis: BasisKind
    omega: float
    mu: float
    match_points: np.ndarray
    match_frames: np.ndarray
    holdout_points: np.ndarray
    holdout_frames: np.ndarray
    A: np.ndarray
    A_holdout: np.ndarray
    pinv: np.ndarray
    condition: float
    col_scale: np.ndarray = field(repr=False)

    @property
    def n_unknowns(self) -> int:
        return len(self.scatterers) * self.D

    def tangential(self, E: np.ndarray, frames: np.ndarray) -> np.ndarray:
        """Stack ``(theta_hat . E, phi_hat . E)`` per point.

        ``E`` is ``(npts, 3)`` or ``(npts, 3, ncol)``; the result has ``2 npts`` rows.
        """
        if E.ndim == 2:
            return np.einsum("nti,ni->nt", frames, E).ravel()
        return np.einsum("nti,nic->ntc", frames, E).reshape(-1, E.shape[-1])

    def solve_coefficients(self, E_match: np.ndarray) -> np.ndarray:
        """Coefficients for a Cartesian incident field sampled at the match points."""
        b = -self.tangential(E_match, self.match_frames)
        return (self.pinv @ b) * self.col_scale

    def solve(self, E_match: np.ndarray, E_holdout: np.ndarray | None = None) -> SurfaceCurrentSolution:
        x = self.solve_coefficients(E_match)
        if E_holdout is None:
            resid, scale = float("nan"), float("nan")
        else:
            inc_t = self.tangential(E_holdout, self.holdout_frames).reshape(-1, 2)
            tot_t = inc_t + (self.A_holdout @ x).reshape(-1, 2)
            resid = float(np.max(np.linalg.norm(tot_t, axis=1), initial=0.0))
            scale = float(np.max(np.linalg.norm(inc_t, axis=1), initial=0.0))
        return SurfaceCurrentSolution(
            coefficients=np.asarray(x, dtype=complex).reshape(len(self.scatterers), self.D),
            scatterer_ids=tuple(s.id for s in self.scatterers),
            D=self.D,
            basis=self.basis,
            residual=resid,
            incident_scale=scale,
            condition=self.condition,
            n_match=self.match_points.shape[0],
            n_holdout=self.holdout_points.shape[0],
        )

    def field_matrix(self, points) -> np.ndarray:
        """``(npts, 3, Q D)`` map from coefficients to the Cartesian scattered field."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        cols = [np.moveaxis(basis_fields(s, pts, self.k, self.D, self.basis, omega=self.omega, mu=self.mu), 0, -1)
                for s in self.scatterers]
        if not cols:
            return np.zeros(pts.shape + (0,), dtype=complex)
        return np.concatenate(cols, axis=-1)


def assemble(
    scene,
    k: float,
    D: int = 16,
    N_s: int = 64,
    basis: BasisKind = "full",
    *,
    omega: float | None = None,
    mu: float = _const.mu_0,
    cond_max: float = 1e12,
) -> MoMSystem:
    """Build the ``(2 Q N_s) x (Q D)`` matching system including all cross-couplings."""
    scs = _scatterers_of(scene)
    if 2 * N_s < D:
        raise PreconditionError(f"need 2 N_s >= D for an overdetermined system (N_s={N_s}, D={D})")
    omega = k * _const.c if omega is None else omega
    base = fibonacci_sphere(N_s)
    held = fibonacci_sphere(N_s, _HOLDOUT_ROTATION)
    mp = np.concatenate([s.c + s.radius * base for s in scs]) if scs else np.zeros((0, 3))
    hp = np.concatenate([s.c + s.radius * held for s in scs]) if scs else np.zeros((0, 3))
    mf = np.concatenate([_tangent_frames(base)] * len(scs)) if scs else np.zeros((0, 2, 3))
    hf = np.concatenate([_tangent_frames(held)] * len(scs)) if scs else np.zeros((0, 2, 3))

    def rows(points, frames):
        if not scs:
            return np.zeros((0, 0), dtype=complex)
        blocks = []
        for s in scs:
            f = basis_fields(s, points, k, D, basis, omega=omega, mu=mu)  # (D, npts, 3)
            blocks.append(np.einsum("nti,dni->ntd", frames, f).reshape(-1, D))
        return np.concatenate(blocks, axis=1)

    A = rows(mp, mf)
    Ah = rows(hp, hf)
    if A.size:
        scale = 1.0 / np.maximum(np.linalg.norm(A, axis=0), np.finfo(float).tiny)
        As = A * scale
        U, s, Vh = np.linalg.svd(As, full_matrices=False)
        cond = float(s[0] / s[-1]) if s[-1] > 0 else np.inf
        if cond > cond_max:
            raise IllConditionedError("point-matching system is rank deficient", cond, A.shape)
        pinv = (Vh.conj().T / s) @ U.conj().T
    else:
        scale = np.zeros(0)
        pinv = np.zeros((0, 0), dtype=complex)
        cond = 1.0
    return MoMSystem(scs, k, D, basis, omega, mu, mp, mf, hp, hf, A, Ah, pinv, cond, scale)


def solve_induced_currents(
    scene,
    incident: FieldFn,
    k: float,
    D: int = 16,
    N_s: int = 64,
    basis: BasisKind = "full",
    **kw,
) -> SurfaceCurrentSolution:
    """Least-squares point matching of ``n x (E_inc + E_s) = 0`` on every sphere.

    ``incident`` maps Cartesian points ``(npts, 3)`` to Cartesian fields.
    """
    sys_ = assemble(scene, k, D, N_s, basis, **kw)
    if not sys_.scatterers:
        return sys_.solve(np.zeros((0, 3), complex), np.zeros((0, 3), complex))
    return sys_.solve(incident(sys_.match_points), incident(sys_.holdout_points))


def scattered_field(
    solution: SurfaceCurrentSolution,
    scene,
    r_field,
    k: float,
    *,
    omega: float | None = None,
    mu: float = _const.mu_0,
) -> swf.ComplexVec3:
    """``E_s(r) = sum_q sum_d j_qd E^d_q(r)`` (Cartesian)."""
    pts = np.atleast_2d(np.asarray(r_field, dtype=float))
    scs = {s.id: s for s in _scatterers_of(scene)}
    out = np.zeros(pts.shape, dtype=complex)
    for sid, coef in zip(solution.scatterer_ids, solution.coefficients):
        f = basis_fields(scs[sid], pts, k, solution.D, solution.basis, omega=omega, mu=mu)
        out += np.tensordot(coef, f, axes=(0, 0))
    return swf.ComplexVec3(out, "cartesian", pts)


def check_non_intersecting(scatterers: Sequence[Scatterer], balls: Sequence[tuple[np.ndarray, float]] = ()) -> bool:
    """True when no two spheres (scatterers and the extra ``balls``) overlap."""
    spheres = [(s.c, s.radius) for s in scatterers] + [(np.asarray(c, float), r) for c, r in balls]
    for i in range(len(spheres)):
        for j in range(i + 1, len(spheres)):
            if np.linalg.norm(spheres[i][0] - spheres[j][0]) <= spheres[i][1] + spheres[j][1]:
                return False
    return True
