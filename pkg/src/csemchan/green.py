"""Free-space scalar and dyadic Green's functions.

The dyadic kernel is split into far (``1/R``), middle (``1/R^2``) and near
(``1/R^3``) parts, each carrying the full ``e^{ikR} / (4 pi R)`` factor, so
``full == far + middle + near`` holds to rounding.
"""

from __future__ import annotations

from typing import Literal

import numpy as np
from scipy import constants as _const

from .errors import DomainError, SingularityError

Part = Literal["full", "far", "middle", "near"]

__all__ = ["scalar_green", "dyadic_green", "radiated_field_integral"]


def _separation(r_field, r_source):
    d = np.asarray(r_field, dtype=float) - np.asarray(r_source, dtype=float)
    R = np.linalg.norm(d, axis=-1)
    if np.any(R == 0):
        raise SingularityError("field and source points coincide")
    return d, R


def scalar_green(r_field, r_source, k: float):
    """``e^{ikR} / (4 pi R)`` with ``R = |r_field - r_source|``."""
    _, R = _separation(r_field, r_source)
    return np.exp(1j * k * R) / (4 * np.pi * R)


def dyadic_green(r_field, r_source, k: float, part: Part = "full") -> np.ndarray:
    """``(I + grad grad / k^2) g`` or one of its far/middle/near parts.

    Broadcasts over leading axes; returns ``(..., 3, 3)`` Cartesian dyads.
    """
    d, R = _separation(r_field, r_source)
    rhat = d / R[..., None]
    g = np.exp(1j * k * R) / (4 * np.pi * R)
    I = np.eye(3)  # noqa: E741
    rr = rhat[..., :, None] * rhat[..., None, :]
    kR = k * R
    if part == "far":
        return (I - rr) * g[..., None, None]
    if part == "middle":
        return (I - 3 * rr) * (1j / kR * g)[..., None, None]
    if part == "near":
        return (I - 3 * rr) * (-g / kR**2)[..., None, None]
    if part != "full":
        raise DomainError(f"unknown part {part!r}")
    a = (1 + 1j / kR - 1 / kR**2) * g
    b = -(1 + 3j / kR - 3 / kR**2) * g
    return I * a[..., None, None] + rr * b[..., None, None]


def radiated_field_integral(
    J,
    source_points,
    weights,
    r_field,
    k: float,
    *,
    omega: float | None = None,
    mu: float = _const.mu_0,
    min_clearance: float | None = None,
) -> np.ndarray:
    """``i omega mu sum_w G(r, r') J(r')`` by direct quadrature.

    ``J`` is Cartesian, shape ``(nsrc, 3)``; returns Cartesian fields ``(nfield, 3)``.
    Field points within ``min_clearance`` of the source support (default: its
    bounding sphere) raise :class:`SingularityError`.
    """
    J = np.asarray(J, dtype=complex)
    src = np.atleast_2d(np.asarray(source_points, dtype=float))
    w = np.asarray(weights, dtype=float)
    rf = np.atleast_2d(np.asarray(r_field, dtype=float))
    if omega is None:
        omega = k * _const.c
    centre = src.mean(axis=0)
    support = np.max(np.linalg.norm(src - centre, axis=-1))
    clearance = support if min_clearance is None else min_clearance
    if np.any(np.linalg.norm(rf - centre, axis=-1) <= clearance):
        raise SingularityError("field point inside the source quadrature support")
    out = np.empty(rf.shape, dtype=complex)
    Jw = J * w[:, None]
    for i, r in enumerate(rf):
        G = dyadic_green(r[None, :], src, k)
        out[i] = np.einsum("nij,nj->i", G, Jw)
    return 1j * omega * mu * out
