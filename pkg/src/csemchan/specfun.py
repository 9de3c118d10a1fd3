"""Scalar special functions for the spherical-wave machinery.

Conventions
-----------
* ``theta`` is the polar angle from +z in [0, pi], ``phi`` the azimuth.
* Associated Legendre functions carry no Condon-Shortley phase:
  ``P_n^m(x) = (1 - x^2)^{m/2} d^m P_n / dx^m``.
* ``Y_nm`` uses ``|m|`` inside the normalisation and the Legendre factor, so
  ``Y_{n,-m} = conj(Y_{n,m})``.

Table routines (``*_table``) return every order ``0..nmax`` at once with the
order on axis 0; they are what the vector-wave code uses. The scalar helpers
wrap them for single orders.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import lgamma, pi, sqrt

import numpy as np
from scipy import special as _sp

from .errors import DomainError, SingularityError

__all__ = [
    "Order",
    "bessel_j",
    "spherical_jn_table",
    "spherical_yn_table",
    "spherical_j",
    "spherical_y",
    "spherical_h1",
    "spherical_jn_derivative",
    "spherical_yn_derivative",
    "assoc_legendre",
    "legendre_tables",
    "spherical_harmonic",
    "sphere_quadrature",
]

_RESCALE = 1e250


@dataclass(frozen=True)
class Order:
    """Degree/order pair of a spherical harmonic."""

    n: int
    m: int

    def __post_init__(self):
        if self.n < 0 or abs(self.m) > self.n:
            raise DomainError(f"invalid order (n={self.n}, m={self.m})")


def _as_real(x, *, allow_zero: bool = True) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DomainError("non-finite argument")
    if np.any(x < 0):
        raise DomainError("negative argument; only x >= 0 is supported")
    if not allow_zero and np.any(x == 0):
        raise SingularityError("second-kind spherical Bessel function is singular at x = 0")
    return x


def bessel_j(n: int, x):
    """Cylindrical Bessel function of the first kind ``J_n(x)`` for integer ``n``."""
    if n < 0:
        raise DomainError("order must be non-negative")
    x = _as_real(x)
    return _sp.jv(n, x)


def spherical_jn_table(nmax: int, x) -> np.ndarray:
    """``j_0 .. j_nmax`` evaluated at ``x``; shape ``(nmax + 1, *x.shape)``.

    Points with ``x > nmax`` use upward recurrence (stable while ``n < x``);
    the rest use Miller's downward recurrence normalised against whichever of
    ``j_0``/``j_1`` is larger in magnitude, so zeros of ``j_0`` are harmless.
    """
    x = _as_real(x)
    shape = x.shape
    xf = x.ravel()
    top = max(nmax, 1)
    out = np.zeros((top + 1, xf.size))

    zero = xf == 0.0
    out[0, zero] = 1.0

    up = xf > nmax
    if np.any(up):
        xu = xf[up]
        s, c = np.sin(xu), np.cos(xu)
        out[0, up] = s / xu
        out[1, up] = s / xu**2 - c / xu
        for n in range(1, top):
            out[n + 1, up] = (2 * n + 1) / xu * out[n, up] - out[n - 1, up]

    down = ~(up | zero)
    if np.any(down):
        xd = xf[down]
        start = int(np.max(xd)) + top + 16 + int(sqrt(40.0 * (top + 1)))
        f_next = np.zeros_like(xd)
        f_cur = np.full_like(xd, 1e-30)
        store = np.zeros((top + 1, xd.size))
        for n in range(start, 0, -1):
            f_prev = (2 * n + 1) / xd * f_cur - f_next
            f_next, f_cur = f_cur, f_prev
            if n - 1 <= top:
                store[n - 1] = f_cur
            if n <= top:
                store[n] = f_next
            big = np.abs(f_cur) > _RESCALE
            if np.any(big):
                f_cur[big] /= _RESCALE
                f_next[big] /= _RESCALE
                store[:, big] /= _RESCALE
        s, c = np.sin(xd), np.cos(xd)
        j0 = s / xd
        j1 = s / xd**2 - c / xd
        use0 = np.abs(j0) >= np.abs(j1)
        scale = np.where(use0, j0 / store[0], j1 / store[1])
        out[:, down] = store * scale

    return out[: nmax + 1].reshape((nmax + 1,) + shape)


def spherical_yn_table(nmax: int, x) -> np.ndarray:
    """``y_0 .. y_nmax`` by upward recurrence; requires ``x > 0``."""
    x = _as_real(x, allow_zero=False)
    top = max(nmax, 1)
    out = np.empty((top + 1,) + x.shape)
    s, c = np.sin(x), np.cos(x)
    out[0] = -c / x
    out[1] = -c / x**2 - s / x
    for n in range(1, top):
        out[n + 1] = (2 * n + 1) / x * out[n] - out[n - 1]
    return out[: nmax + 1]


def _derivative_from_table(table: np.ndarray) -> np.ndarray:
    """d/dx of a spherical Bessel table holding orders ``0..nmax+1``."""
    nmax = table.shape[0] - 2
    d = np.empty((nmax + 1,) + table.shape[1:], dtype=table.dtype)
    d[0] = -table[1]
    for n in range(1, nmax + 1):
        d[n] = (n * table[n - 1] - (n + 1) * table[n + 1]) / (2 * n + 1)
    return d


def spherical_jn_derivative(nmax: int, x) -> np.ndarray:
    """``j_n'(x)`` for ``n = 0..nmax`` via ``(n j_{n-1} - (n+1) j_{n+1}) / (2n+1)``."""
    return _derivative_from_table(spherical_jn_table(nmax + 1, x))


def spherical_yn_derivative(nmax: int, x) -> np.ndarray:
    return _derivative_from_table(spherical_yn_table(nmax + 1, x))


def spherical_j(n: int, x):
    """Spherical Bessel function of the first kind, ``j_0(0) = 1``."""
    if n < 0:
        raise DomainError("order must be non-negative")
    return spherical_jn_table(n, x)[n]


def spherical_y(n: int, x):
    if n < 0:
        raise DomainError("order must be non-negative")
    return spherical_yn_table(n, x)[n]


def spherical_h1(n: int, x):
    """Spherical Hankel function of the first kind ``h_n = j_n + i y_n``."""
    if n < 0:
        raise DomainError("order must be non-negative")
    x = _as_real(x, allow_zero=False)
    return spherical_j(n, x) + 1j * spherical_y(n, x)


def assoc_legendre(n: int, m: int, x):
    """Associated Legendre function ``P_n^m(x)`` (no Condon-Shortley phase).

    Upward recurrence in degree from the closed-form ``P_m^m``.
    """
    if m < 0 or m > n:
        raise DomainError(f"need 0 <= m <= n, got n={n}, m={m}")
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)) or np.any(np.abs(x) > 1.0):
        raise DomainError("|x| must be <= 1")
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    pmm = np.ones_like(x)
    for i in range(1, m + 1):
        pmm = pmm * (2 * i - 1) * s
    if n == m:
        return pmm
    p_prev, p = pmm, x * (2 * m + 1) * pmm
    for nn in range(m + 1, n):
        p_prev, p = p, ((2 * nn + 1) * x * p - (nn + m) * p_prev) / (nn - m + 1)
    return p


def legendre_tables(nmax: int, cos_theta, sin_theta=None):
    """Normalised Legendre tables used to build ``Y_nm`` and its derivatives.

    Returns ``(pbar, pibar, taubar)``, each of shape ``(nmax+1, nmax+1, *x.shape)``
    indexed ``[n, m]`` with ``0 <= m <= n``:

    * ``pbar[n, m]``   = ``N_nm P_n^m(cos theta)``, ``N_nm = sqrt((2n+1)/4pi (n-m)!/(n+m)!)``
    * ``pibar[n, m]``  = ``pbar[n, m] / sin(theta)`` for ``m >= 1`` (0 for ``m = 0``),
      computed without dividing so it stays finite at the poles
    * ``taubar[n, m]`` = ``d pbar[n, m] / d theta``
    """
    ct = np.asarray(cos_theta, dtype=float)
    st = np.sqrt(np.clip(1.0 - ct * ct, 0.0, None)) if sin_theta is None else np.asarray(sin_theta, float)
    shape = (nmax + 2, nmax + 2) + ct.shape
    pbar = np.zeros(shape)
    pibar = np.zeros(shape)

    pbar[0, 0] = 1.0 / sqrt(4.0 * pi)
    for m in range(0, nmax + 1):
        if m > 0:
            c = sqrt((2 * m + 1) / (2.0 * m))
            pibar[m, m] = c * pbar[m - 1, m - 1]
            pbar[m, m] = pibar[m, m] * st
        if m + 1 <= nmax + 1:
            c = sqrt(2 * m + 3)
            pbar[m + 1, m] = c * ct * pbar[m, m]
            pibar[m + 1, m] = c * ct * pibar[m, m]
        for n in range(m + 2, nmax + 2):
            a = sqrt((4.0 * n * n - 1) / (n * n - m * m))
            b = sqrt(((n - 1) ** 2 - m * m) / (4.0 * (n - 1) ** 2 - 1))
            pbar[n, m] = a * (ct * pbar[n - 1, m] - b * pbar[n - 2, m])
            pibar[n, m] = a * (ct * pibar[n - 1, m] - b * pibar[n - 2, m])

    taubar = np.zeros(shape)
    for n in range(0, nmax + 1):
        taubar[n, 0] = -sqrt(n * (n + 1.0)) * pbar[n, 1]
        for m in range(1, n + 1):
            taubar[n, m] = 0.5 * (
                sqrt((n + m) * (n - m + 1.0)) * pbar[n, m - 1]
                - sqrt((n - m) * (n + m + 1.0)) * pbar[n, m + 1]
            )
    sl = (slice(0, nmax + 1), slice(0, nmax + 1))
    return pbar[sl], pibar[sl], taubar[sl]


def spherical_harmonic(n: int, m: int, theta, phi):
    """``Y_nm(theta, phi)`` with the ``|m|`` normalisation; factorials in log space."""
    Order(n, m)
    am = abs(m)
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    norm = sqrt((2 * n + 1) / (4.0 * pi)) * np.exp(0.5 * (lgamma(n - am + 1) - lgamma(n + am + 1)))
    return norm * assoc_legendre(n, am, np.cos(theta)) * np.exp(1j * m * phi)


def sphere_quadrature(n_theta: int, n_phi: int):
    """Gauss-Legendre in ``cos(theta)`` times trapezoid in ``phi``.

    Returns flattened ``(theta, phi, weight)`` arrays; weights sum to ``4 pi``.
    Exact for ``Y_{n1 m1} conj(Y_{n2 m2})`` when ``n1 + n2 <= 2 n_theta - 1``
    and ``|m1 - m2| < n_phi``.
    """
    x, wx = np.polynomial.legendre.leggauss(n_theta)
    phi = 2.0 * pi * np.arange(n_phi) / n_phi
    th = np.arccos(x)
    T, P = np.meshgrid(th, phi, indexing="ij")
    W = np.repeat(wx[:, None] * (2.0 * pi / n_phi), n_phi, axis=1)
    return T.ravel(), P.ravel(), W.ravel()
