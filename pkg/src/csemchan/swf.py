"""Vector spherical wave functions and the radiation-operator singular system.

Mode ``p`` (1-based) addresses the triple ``(n, m, l)`` via
``p = 2 (n (n + 1) + m - 1) + l`` with ``l = 1`` the TE family
``curl(r z_n Y_nm)`` and ``l = 2`` the TM family ``(1/k) curl curl(r z_n Y_nm)``.
``U`` uses the outgoing Hankel function, ``V`` the regular Bessel function.

All evaluators are vectorised over points and over modes: they return arrays
of shape ``(P, npts, 3)`` holding ``(r, theta, phi)`` components in the local
spherical basis of the expansion centre.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy import constants as _const

from . import specfun
from .errors import AccuracyError, DomainError, ExpansionValidityError, SingularityError

Basis = Literal["cartesian", "spherical"]

_CHUNK = 4096


# --------------------------------------------------------------------------- indexing


@dataclass(frozen=True)
class SphIndex:
    """Spherical-wave mode ``(n, m, l)``; ``l = 1`` TE, ``l = 2`` TM."""

    n: int
    m: int
    l: int  # noqa: E741

    def __post_init__(self):
        if self.n < 1 or abs(self.m) > self.n or self.l not in (1, 2):
            raise DomainError(f"invalid mode (n={self.n}, m={self.m}, l={self.l})")

    @property
    def p(self) -> int:
        return flatten(self.n, self.m, self.l)


def flatten(n: int, m: int, l: int) -> int:  # noqa: E741
    return 2 * (n * (n + 1) + m - 1) + l


def unflatten(p: int) -> SphIndex:
    if p < 1:
        raise DomainError("mode index starts at 1")
    l = 2 if p % 2 == 0 else 1  # noqa: E741
    q = (p - l) // 2 + 1
    n = math.isqrt(q)
    return SphIndex(n, q - n * (n + 1), l)


def mode_count(n_trunc: int) -> int:
    """``P_max = 2 N (N + 2)``."""
    return 2 * n_trunc * (n_trunc + 2)


def mode_arrays(n_trunc: int):
    """Arrays ``(n, m, l)`` for ``p = 1 .. P_max`` in ``p`` order."""
    ns, ms, ls = [], [], []
    for n in range(1, n_trunc + 1):
        for m in range(-n, n + 1):
            for l in (1, 2):  # noqa: E741
                ns.append(n)
                ms.append(m)
                ls.append(l)
    return np.array(ns), np.array(ms), np.array(ls)


def default_truncation(k: float, radius: float) -> int:
    return int(math.ceil(k * radius)) + 10


# --------------------------------------------------------------------------- coordinates


def cart_to_sph(points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(r, theta, phi)`` of Cartesian points; the origin maps to ``theta = phi = 0``."""
    p = np.asarray(points, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    r = np.sqrt(x * x + y * y + z * z)
    theta = np.arctan2(np.sqrt(x * x + y * y), z)
    phi = np.mod(np.arctan2(y, x), 2 * np.pi)
    # signed zeros would otherwise give phi = pi at the origin
    origin = r == 0
    if np.any(origin):
        theta = np.where(origin, 0.0, theta)
        phi = np.where(origin, 0.0, phi)
    return r, theta, phi


def sph_to_cart(r, theta, phi) -> np.ndarray:
    r, theta, phi = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (r, theta, phi)))
    st = np.sin(theta)
    return np.stack([r * st * np.cos(phi), r * st * np.sin(phi), r * np.cos(theta)], axis=-1)


def spherical_basis(theta, phi) -> np.ndarray:
    """Rows ``(r_hat, theta_hat, phi_hat)``; shape ``(..., 3, 3)``."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    st, ct, sp, cp = np.sin(theta), np.cos(theta), np.sin(phi), np.cos(phi)
    zero = np.zeros_like(st * sp)
    er = np.stack([st * cp, st * sp, ct + zero], axis=-1)
    et = np.stack([ct * cp, ct * sp, -st + zero], axis=-1)
    ep = np.stack([-sp + zero, cp + zero, zero], axis=-1)
    return np.stack([er, et, ep], axis=-2)


@dataclass
class ComplexVec3:
    """Complex 3-vectors (batched on leading axes) tagged with their basis.

    ``points`` are Cartesian sample positions; for the spherical basis the
    unit vectors are those at ``points - origin``.
    """

    values: np.ndarray
    basis: Basis
    points: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        self.points = np.asarray(self.points, dtype=float)
        self.origin = np.asarray(self.origin, dtype=float)
        if self.values.shape[-1] != 3:
            raise DomainError("last axis must hold three components")
        if self.basis not in ("cartesian", "spherical"):
            raise DomainError(f"unknown basis {self.basis!r}")

    def _rot(self) -> np.ndarray:
        _, th, ph = cart_to_sph(self.points - self.origin)
        return spherical_basis(th, ph)

    def to_cartesian(self) -> ComplexVec3:
        if self.basis == "cartesian":
            return self
        v = np.einsum("...i,...ij->...j", self.values, self._rot())
        return ComplexVec3(v, "cartesian", self.points, self.origin)

    def to_spherical(self, origin=None) -> ComplexVec3:
        cart = self.to_cartesian()
        o = self.origin if origin is None else np.asarray(origin, dtype=float)
        _, th, ph = cart_to_sph(cart.points - o)
        v = np.einsum("...ij,...j->...i", spherical_basis(th, ph), cart.values)
        return ComplexVec3(v, "spherical", cart.points, o)

    @property
    def norm(self) -> np.ndarray:
        return np.sqrt(np.sum(np.abs(self.values) ** 2, axis=-1))


# --------------------------------------------------------------------------- mode fields


def _radial_tables(nmax: int, rho: np.ndarray, kind: str):
    """``z_n``, ``z_n / rho`` and ``(rho z_n)' / rho`` for ``n = 0..nmax``."""
    j = specfun.spherical_jn_table(nmax + 1, rho)
    dj = np.empty((nmax + 1,) + rho.shape)
    dj[0] = -j[1]
    for n in range(1, nmax + 1):
        dj[n] = (n * j[n - 1] - (n + 1) * j[n + 1]) / (2 * n + 1)
    j = j[: nmax + 1]
    if kind == "h":
        if np.any(rho == 0):
            raise SingularityError("outgoing spherical waves are singular at the expansion centre")
        y = specfun.spherical_yn_table(nmax + 1, rho)
        dy = np.empty_like(dj)
        dy[0] = -y[1]
        for n in range(1, nmax + 1):
            dy[n] = (n * y[n - 1] - (n + 1) * y[n + 1]) / (2 * n + 1)
        z = j + 1j * y[: nmax + 1]
        dz = dj + 1j * dy
        return z, z / rho, z / rho + dz
    zr = np.zeros_like(j)
    pos = rho > 0
    zr[:, pos] = j[:, pos] / rho[pos]
    dpr = zr + dj
    if nmax >= 1:
        zr[1, ~pos] = 1.0 / 3.0
        dpr[1, ~pos] = 2.0 / 3.0
    return j, zr, dpr


def mode_fields(
    n_trunc: int,
    k: float,
    points,
    kind: Literal["h", "j"] = "h",
    modes: np.ndarray | None = None,
) -> np.ndarray:
    """``U`` (``kind="h"``) or ``V`` (``kind="j"``) at Cartesian ``points``.

    Returns ``(P, npts, 3)`` in the local spherical basis about the origin,
    where ``P`` is either ``P_max(n_trunc)`` or ``len(modes)`` (1-based ``p``).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    r, theta, phi = cart_to_sph(pts)
    N = n_trunc
    # one row per (n, m); TE/TM rows are interleaved at the end (p = 2 (q - 1) + l)
    nq = np.repeat(np.arange(1, N + 1), 2 * np.arange(1, N + 1) + 1)
    mq = np.concatenate([np.arange(-n, n + 1) for n in range(1, N + 1)])
    z, zr, dpr = _radial_tables(N, k * r, kind)
    pbar, pibar, taubar = specfun.legendre_tables(N, np.cos(theta), np.sin(theta))
    am = np.abs(mq)
    e = np.exp(1j * np.arange(-N, N + 1)[:, None] * phi[None, :])[mq + N]
    Tau_e = taubar[nq, am] * e
    mPi_e = (1j * mq[:, None]) * pibar[nq, am] * e
    Z, DP = z[nq], dpr[nq]
    out = np.empty((2 * nq.size, pts.shape[0], 3), dtype=complex)
    te = out[0::2]
    te[..., 0] = 0.0
    te[..., 1] = Z * mPi_e
    te[..., 2] = -Z * Tau_e
    tm = out[1::2]
    tm[..., 0] = (nq * (nq + 1.0))[:, None] * zr[nq] * pbar[nq, am] * e
    tm[..., 1] = DP * Tau_e
    tm[..., 2] = DP * mPi_e
    if modes is not None:
        sel = np.asarray(modes, dtype=int) - 1
        if np.any(sel < 0) or np.any(sel >= out.shape[0]):
            raise DomainError("mode index outside the truncation")
        out = out[sel]
    return out


def to_cartesian_fields(fields: np.ndarray, points, origin=None) -> np.ndarray:
    """Rotate ``(..., npts, 3)`` spherical components at ``points`` to Cartesian."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if origin is not None:
        pts = pts - origin
    _, th, ph = cart_to_sph(pts)
    R = spherical_basis(th, ph)
    return (
        fields[..., 0:1] * R[:, 0, :]
        + fields[..., 1:2] * R[:, 1, :]
        + fields[..., 2:3] * R[:, 2, :]
    )


def _eval_single(idx: SphIndex, point, k: float, kind: str) -> ComplexVec3:
    point = np.asarray(point, dtype=float)
    flat = point.reshape(-1, 3)
    cart = sph_to_cart(flat[:, 0], flat[:, 1], flat[:, 2])
    # keep the caller's angles at the origin where they are otherwise undefined
    v = mode_fields(idx.n, k, cart, kind, modes=[idx.p])
    vals = v[0]
    at_origin = flat[:, 0] == 0
    if np.any(at_origin):
        rot = spherical_basis(flat[:, 1], flat[:, 2])
        cart_vals = np.einsum("ni,nij->nj", vals, spherical_basis(0.0 * flat[:, 1], 0.0 * flat[:, 2]))
        vals = np.where(at_origin[:, None], np.einsum("nij,nj->ni", rot, cart_vals), vals)
    return ComplexVec3(vals.reshape(point.shape), "spherical", cart.reshape(point.shape))


def eval_U(idx: SphIndex, point, k: float) -> ComplexVec3:
    """Outgoing mode ``U_nml`` at spherical-coordinate ``point = (r, theta, phi)``."""
    if np.any(np.asarray(point, dtype=float)[..., 0] <= 0):
        raise SingularityError("U is singular at r = 0")
    return _eval_single(idx, point, k, "h")


def eval_V(idx: SphIndex, point, k: float) -> ComplexVec3:
    """Regular mode ``V_nml`` at spherical-coordinate ``point = (r, theta, phi)``."""
    return _eval_single(idx, point, k, "j")


# --------------------------------------------------------------------------- geometry & quadrature


@dataclass(frozen=True)
class Geometry:
    """Source ball of radius ``R_t`` at the origin and a receive region.

    ``rx_kind="ball"`` places the receive ball of radius ``R_r`` at distance
    ``D`` along ``rx_axis``. ``rx_kind="shell"`` uses the concentric shell
    ``D - R_r <= |r| <= D + R_r`` instead; over that region the ``u_p`` are
    exactly orthogonal.
    """

    R_t: float
    R_r: float
    D: float
    rx_axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    rx_kind: Literal["ball", "shell"] = "ball"

    def __post_init__(self):
        if not (self.R_t > 0 and self.R_r > 0 and self.D > 0):
            raise DomainError("radii and distance must be positive")
        if self.D - self.R_r <= self.R_t:
            raise ExpansionValidityError("receive region overlaps the source ball (need D > R_t + R_r)")
        if self.rx_kind not in ("ball", "shell"):
            raise DomainError(f"unknown rx_kind {self.rx_kind!r}")

    @property
    def rx_center(self) -> np.ndarray:
        a = np.asarray(self.rx_axis, dtype=float)
        return self.D * a / np.linalg.norm(a)


def ball_quadrature(radius: float, n_r: int, n_theta: int, n_phi: int, center=None, r_inner: float = 0.0):
    """Product rule over a ball (or shell ``r_inner <= r <= radius``).

    Gauss-Legendre in radius, :func:`specfun.sphere_quadrature` in angle.
    Returns Cartesian points ``(npts, 3)`` and weights ``(npts,)``.
    """
    x, w = np.polynomial.legendre.leggauss(n_r)
    half = 0.5 * (radius - r_inner)
    r = r_inner + half * (x + 1.0)
    wr = half * w * r * r
    th, ph, wa = specfun.sphere_quadrature(n_theta, n_phi)
    pts = sph_to_cart(r[:, None], th[None, :], ph[None, :]).reshape(-1, 3)
    wts = (wr[:, None] * wa[None, :]).ravel()
    if center is not None:
        pts = pts + np.asarray(center, dtype=float)
    return pts, wts


def _chunked_sq_norms(n_trunc, k, pts, wts, kind, origin=None):
    acc = np.zeros(mode_count(n_trunc))
    rel = pts if origin is None else pts - origin
    for s in range(0, rel.shape[0], _CHUNK):
        f = mode_fields(n_trunc, k, rel[s : s + _CHUNK], kind)
        acc += (np.abs(f) ** 2).sum(axis=-1) @ wts[s : s + _CHUNK]
    return acc


def _separable_sq_norms(n_trunc, k, r_lo, r_hi, n_r, kind):
    """Concentric product rule evaluated in factorised form.

    On a ball/shell centred at the expansion origin ``|F_p|^2`` splits into a
    radial factor times an angular factor, so the same product quadrature as
    :func:`ball_quadrature` costs ``O(P (n_r + n_ang))`` instead of ``O(P n_r n_ang)``.
    """
    x, w = np.polynomial.legendre.leggauss(n_r)
    half = 0.5 * (r_hi - r_lo)
    r = r_lo + half * (x + 1.0)
    wr = half * w * r * r
    z, zr, dpr = _radial_tables(n_trunc, k * r, kind)
    th, _, wa = specfun.sphere_quadrature(n_trunc + 2, 1)
    pbar, pibar, taubar = specfun.legendre_tables(n_trunc, np.cos(th), np.sin(th))
    n_arr, m_arr, l_arr = mode_arrays(n_trunc)
    am = np.abs(m_arr)
    # phi integrates |e^{im phi}|^2 exactly; wa already carries the 2 pi
    a_r = np.einsum("pa,a->p", pbar[n_arr, am] ** 2, wa)
    a_t = np.einsum("pa,a->p", taubar[n_arr, am] ** 2 + (m_arr[:, None] * pibar[n_arr, am]) ** 2, wa)
    rad_z = np.abs(z[n_arr]) ** 2 @ wr
    rad_zr = np.abs(zr[n_arr]) ** 2 @ wr
    rad_dp = np.abs(dpr[n_arr]) ** 2 @ wr
    nn1 = n_arr * (n_arr + 1.0)
    return np.where(l_arr == 1, rad_z * a_t, nn1**2 * rad_zr * a_r + rad_dp * a_t)


def gram_matrix(n_trunc, k, pts, wts, kind) -> np.ndarray:
    """``G[p, q] = sum_w F_p . conj(F_q)`` on the given quadrature (test helper)."""
    P = mode_count(n_trunc)
    G = np.zeros((P, P), dtype=complex)
    for s in range(0, pts.shape[0], _CHUNK):
        f = to_cartesian_fields(mode_fields(n_trunc, k, pts[s : s + _CHUNK], kind), pts[s : s + _CHUNK])
        fw = f * wts[s : s + _CHUNK, None]
        G += fw.reshape(P, -1) @ f.reshape(P, -1).conj().T
    return G


# --------------------------------------------------------------------------- radiation operator


@dataclass(frozen=True)
class RadiationOperator:
    """Truncated singular system of the source-ball to receive-region map.

    ``E(r) = sum_p sigma[p] j[p] u_p(r)`` with ``u_p = U_p / norm_U[p]``.
    Arrays are indexed by ``p - 1``.
    """

    geometry: Geometry
    k: float
    omega: float
    mu: float
    n_trunc: int
    n: np.ndarray
    m: np.ndarray
    l: np.ndarray  # noqa: E741
    norm_U: np.ndarray
    norm_V: np.ndarray
    sigma: np.ndarray
    source_nodes: tuple[int, int, int]

    @property
    def P_max(self) -> int:
        return self.n.size

    def a(self) -> np.ndarray:
        return self.norm_U * self.norm_V / (self.n * (self.n + 1.0))

    def u(self, points, P: int | None = None) -> np.ndarray:
        """Normalised ``u_p`` at Cartesian ``points``; ``(P, npts, 3)`` spherical about the origin."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        r = np.linalg.norm(pts, axis=-1)
        if np.any(r <= self.geometry.R_t):
            raise ExpansionValidityError("field point inside the source ball; expansion invalid")
        P = self.P_max if P is None else P
        nt = _truncation_for(P)
        f = mode_fields(nt, self.k, pts, "h")[:P]
        return f / self.norm_U[:P, None, None]

    def v(self, points, P: int | None = None) -> np.ndarray:
        """Normalised ``v_p`` at Cartesian ``points`` in Cartesian components."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        P = self.P_max if P is None else P
        nt = _truncation_for(P)
        f = to_cartesian_fields(mode_fields(nt, self.k, pts, "j")[:P], pts)
        return f / self.norm_V[:P, None, None]

    def source_grid(self):
        """Quadrature grid over the source ball used for norms and current expansion."""
        n_r, n_t, n_p = self.source_nodes
        return ball_quadrature(self.geometry.R_t, n_r, n_t, n_p)


def _truncation_for(P: int) -> int:
    n = 1
    while mode_count(n) < P:
        n += 1
    return n


def _converged_norms(compute, start: tuple[int, ...], tol: float, max_doublings: int):
    if max_doublings < 1:
        raise DomainError("self-convergence check needs at least one doubling")
    nodes = start
    prev = compute(nodes)
    for _ in range(max_doublings):
        nxt_nodes = tuple(2 * v for v in nodes)
        cur = compute(nxt_nodes)
        change = np.max(np.abs(cur - prev) / cur)
        if change <= tol:
            return cur, nxt_nodes
        nodes, prev = nxt_nodes, cur
    raise AccuracyError(f"volume norms not converged: relative change {change:.2e} > {tol:.0e}")


def normalize_modes(
    geometry: Geometry,
    k: float,
    n_trunc: int | None = None,
    *,
    omega: float | None = None,
    mu: float = _const.mu_0,
    tol: float = 1e-6,
    max_doublings: int = 3,
) -> RadiationOperator:
    """Volume norms of ``U_p`` over the receive region and ``V_p`` over the source ball.

    Each norm set is computed twice with every node count doubled; if the
    relative change stays above ``tol`` after ``max_doublings`` attempts an
    :class:`AccuracyError` is raised.
    """
    if k <= 0:
        raise DomainError("wavenumber must be positive")
    if n_trunc is None:
        n_trunc = default_truncation(k, geometry.R_t)
    if n_trunc < 1:
        raise DomainError("n_trunc must be >= 1")
    if omega is None:
        omega = k * _const.c
    n_arr, m_arr, l_arr = mode_arrays(n_trunc)

    kRt = k * geometry.R_t
    src_start = (max(8, int(math.ceil(0.5 * (kRt + n_trunc))) + 4), n_trunc + 2, 2 * n_trunc + 2)

    def src_norms(nodes):
        return _separable_sq_norms(n_trunc, k, 0.0, geometry.R_t, nodes[0], "j")

    # angular rule is exact for |V|^2 at this truncation; only the radial rule is refined
    sq_v, (n_r_src,) = _converged_norms(lambda nd: src_norms((nd[0],)), (src_start[0],), tol, max_doublings)
    norm_V = np.sqrt(sq_v)

    g = geometry
    if g.rx_kind == "shell":
        def rx_norms(nodes):
            return _separable_sq_norms(n_trunc, k, g.D - g.R_r, g.D + g.R_r, nodes[0], "h")

        kd = k * 2 * g.R_r
        sq_u, _ = _converged_norms(lambda nd: rx_norms(nd), (max(8, int(kd / 4) + 4),), tol, max_doublings)
    else:
        center = g.rx_center

        def rx_norms(nodes):
            pts, wts = ball_quadrature(g.R_r, nodes[0], nodes[1], nodes[2], center=center)
            return _chunked_sq_norms(n_trunc, k, pts, wts, "h")

        sq_u, _ = _converged_norms(rx_norms, _rx_start(k, g, n_trunc), tol, max_doublings)
    norm_U = np.sqrt(sq_u)

    a = norm_U * norm_V / (n_arr * (n_arr + 1.0))
    sigma = -omega * mu * k * a
    return RadiationOperator(
        geometry=geometry,
        k=float(k),
        omega=float(omega),
        mu=float(mu),
        n_trunc=int(n_trunc),
        n=n_arr,
        m=m_arr,
        l=l_arr,
        norm_U=norm_U,
        norm_V=norm_V,
        sigma=sigma,
        source_nodes=(n_r_src, src_start[1], src_start[2]),
    )


def _rx_start(k: float, g: Geometry, n_trunc: int) -> tuple[int, int, int]:
    # |U_p|^2 varies on the angular scale 1/n seen from the source and, close in,
    # on the radial scale of the Hankel envelope; the ball subtends ~R_r / D.
    ang = n_trunc * g.R_r / (g.D - g.R_r)
    near = max(0.0, (n_trunc * n_trunc / (k * (g.D - g.R_r)) - 1.0)) * g.R_r / (g.D - g.R_r)
    base = int(math.ceil(2 * ang + 2 * near)) + 4
    return (base, base, 2 * base)


# --------------------------------------------------------------------------- expansion / synthesis


def expand_current(J, operator: RadiationOperator, P: int | None = None) -> np.ndarray:
    """``j_p = int J . conj(v_p)`` with ``J`` sampled (Cartesian) on ``operator.source_grid()``."""
    pts, wts = operator.source_grid()
    J = np.asarray(J, dtype=complex)
    if J.shape != pts.shape:
        raise DomainError(f"current must be sampled on the source grid, shape {pts.shape}")
    P = operator.P_max if P is None else P
    nt = _truncation_for(P)
    _, th, ph = cart_to_sph(pts)
    # project onto the local spherical basis once instead of rotating every mode
    Js = np.einsum("nij,nj->ni", spherical_basis(th, ph), J) * wts[:, None]
    j = np.zeros(P, dtype=complex)
    for s in range(0, pts.shape[0], _CHUNK):
        f = mode_fields(nt, operator.k, pts[s : s + _CHUNK], "j")[:P]
        j += f.reshape(P, -1).conj() @ Js[s : s + _CHUNK].ravel()
    return j / operator.norm_V[:P]


def synthesize_current(j, operator: RadiationOperator, points=None) -> np.ndarray:
    """``J(r') = sum_p j_p v_p(r')`` (Cartesian) on ``points`` or the source grid."""
    j = np.asarray(j, dtype=complex)
    if points is None:
        points, _ = operator.source_grid()
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    nt = _truncation_for(j.size)
    c = j / operator.norm_V[: j.size]
    out = np.zeros(pts.shape, dtype=complex)
    for s in range(0, pts.shape[0], _CHUNK):
        blk = pts[s : s + _CHUNK]
        f = mode_fields(nt, operator.k, blk, "j")[: j.size]
        out[s : s + _CHUNK] = to_cartesian_fields(np.tensordot(c, f, axes=(0, 0)), blk)
    return out


def radiate(j, points, operator: RadiationOperator) -> ComplexVec3:
    """``E(r) = sum_p sigma_p j_p u_p(r)`` at Cartesian ``points`` (spherical components).

    ``j`` may be shorter than ``P_max``; missing coefficients are zero.
    """
    j = np.asarray(j, dtype=complex).ravel()
    if j.size > operator.P_max:
        raise DomainError("more coefficients than modes in the operator")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if np.any(np.linalg.norm(pts, axis=-1) <= operator.geometry.R_t):
        raise ExpansionValidityError("field point inside the source ball; expansion invalid")
    P = j.size
    vals = np.zeros(pts.shape, dtype=complex)
    if P:
        for s in range(0, pts.shape[0], _CHUNK):
            u = operator.u(pts[s : s + _CHUNK], P)
            vals[s : s + _CHUNK] = np.tensordot(operator.sigma[:P] * j, u, axes=(0, 0))
    return ComplexVec3(vals, "spherical", pts)


def green_expansion(r_field, r_source, k: float, n_trunc: int) -> np.ndarray:
    """Dyadic Green's function from the truncated spherical-wave series.

    ``G = i k sum_p U_p(r) V_p(r')^H / (n (n + 1))`` for ``|r'| < |r|``,
    returned as a Cartesian ``3 x 3`` matrix per point pair (shape ``(npair, 3, 3)``).
    """
    rf = np.atleast_2d(np.asarray(r_field, dtype=float))
    rs = np.atleast_2d(np.asarray(r_source, dtype=float))
    if np.any(np.linalg.norm(rs, axis=-1) >= np.linalg.norm(rf, axis=-1)):
        raise ExpansionValidityError("series requires |r'| < |r|")
    n_arr, _, _ = mode_arrays(n_trunc)
    U = to_cartesian_fields(mode_fields(n_trunc, k, rf, "h"), rf)
    V = to_cartesian_fields(mode_fields(n_trunc, k, rs, "j"), rs)
    c = 1.0 / (n_arr * (n_arr + 1.0))
    return 1j * k * np.einsum("p,pni,pnj->nij", c, U, V.conj())
