"""Stochastic scatterer placement and birth-death evolution.

Scatterers are drawn near the receive ball from an anisotropic Gaussian whose
axes are the Tx->Rx direction (delay spread), the horizontal perpendicular
(azimuth spread) and the vertical perpendicular (elevation spread). Their
number is Poisson distributed. Over time and sampling displacement each
scatterer survives with an exponential law and new ones are born so that the
mean population relaxes to ``lambda_B / lambda_D``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np

from .errors import DomainError, PackingError
from .scatter import Scatterer
from .swf import Geometry


@dataclass(frozen=True)
class EnvParams:
    """Environment statistics.

    Rates are per metre, speeds in m/s, lengths in metres. ``Q_mean`` is the
    mean scatterer count of a fresh scene; the default birth rate keeps the
    birth-death equilibrium at the same mean.
    """

    lambda_B: float = 20.0
    lambda_D: float = 4.0
    P_f: float = 0.3
    dv_T: float = 0.0
    dv_R: float = 1.0
    D_c: float = 30.0
    sigma_DS: float = 0.1
    sigma_AS: float = 0.1
    sigma_ES: float = 0.1
    Q_mean: float = 5.0
    radius: float = 0.005
    offset: float | None = None
    seed: int = 0
    max_attempts: int = 1000

    def __post_init__(self):
        for name in ("lambda_B", "lambda_D", "D_c", "sigma_DS", "sigma_AS", "sigma_ES", "radius"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if not 0.0 <= self.P_f <= 1.0:
            raise DomainError("P_f must lie in [0, 1]")
        if self.dv_T < 0 or self.dv_R < 0 or self.Q_mean < 0:
            raise DomainError("speeds and Q_mean must be non-negative")
        if self.max_attempts < 1:
            raise DomainError("max_attempts must be >= 1")

    @property
    def equilibrium_count(self) -> float:
        return self.lambda_B / self.lambda_D

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([self.sigma_DS, self.sigma_AS, self.sigma_ES])


@dataclass(frozen=True, eq=False)
class Scene:
    """Scatterers and users at time ``t``; users are Cartesian points in the Rx ball."""

    geometry: Geometry
    scatterers: tuple[Scatterer, ...]
    users: np.ndarray
    params: EnvParams
    t: float = 0.0
    next_id: int = 0
    meta: dict[str, Any] = field(default_factory=dict, compare=False)

    @property
    def alive(self) -> tuple[Scatterer, ...]:
        return tuple(s for s in self.scatterers if s.alive)

    def with_users(self, users) -> Scene:
        return replace(self, users=np.atleast_2d(np.asarray(users, dtype=float)).reshape(-1, 3))

    def without_scatterers(self) -> Scene:
        return replace(self, scatterers=())

    def to_dict(self) -> dict:
        g = self.geometry
        return {
            "geometry": {"R_t": g.R_t, "R_r": g.R_r, "D": g.D, "rx_axis": list(map(float, g.rx_axis)),
                         "rx_kind": g.rx_kind},
            "params": asdict(self.params),
            "t": float(self.t),
            "next_id": int(self.next_id),
            "users": [list(map(float, u)) for u in self.users],
            "scatterers": [
                {"id": int(s.id), "center": list(map(float, s.center)), "radius": float(s.radius), "alive": s.alive}
                for s in self.scatterers
            ],
        }

    def to_json(self) -> str:
        """Deterministic text form; floats round-trip exactly."""
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> Scene:
        g = d["geometry"]
        geom = Geometry(g["R_t"], g["R_r"], g["D"], rx_axis=tuple(g["rx_axis"]), rx_kind=g["rx_kind"])
        scs = tuple(Scatterer(tuple(s["center"]), s["radius"], id=s["id"], alive=s["alive"]) for s in d["scatterers"])
        users = np.asarray(d["users"], dtype=float).reshape(-1, 3)
        return cls(geom, scs, users, EnvParams(**d["params"]), d["t"], d["next_id"])

    @classmethod
    def from_json(cls, text: str) -> Scene:
        return cls.from_dict(json.loads(text))


def placement_frame(geometry: Geometry) -> np.ndarray:
    """Rows: Tx->Rx axis, horizontal perpendicular, vertical perpendicular."""
    e1 = np.asarray(geometry.rx_axis, dtype=float)
    e1 = e1 / np.linalg.norm(e1)
    up = np.array([0.0, 0.0, 1.0])
    if abs(e1 @ up) > 0.99:
        up = np.array([0.0, 1.0, 0.0])
    e2 = np.cross(up, e1)
    e2 /= np.linalg.norm(e2)
    return np.stack([e1, e2, np.cross(e1, e2)])


def placement_center(params: EnvParams, geometry: Geometry) -> np.ndarray:
    off = geometry.R_r + 3 * params.radius if params.offset is None else params.offset
    return geometry.rx_center + off * placement_frame(geometry)[0]


def sample_positions(params: EnvParams, geometry: Geometry, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` unconstrained draws from the placement Gaussian."""
    local = rng.standard_normal((n, 3)) * params.sigmas
    return placement_center(params, geometry) + local @ placement_frame(geometry)


def _fits(c: np.ndarray, a: float, geometry: Geometry, rx_center: np.ndarray, others: list[Scatterer]) -> bool:
    if c @ c <= (geometry.R_t + a) ** 2:
        return False
    if geometry.rx_kind == "shell":
        if abs(np.sqrt(c @ c) - geometry.D) <= geometry.R_r + a:
            return False
    else:
        d = c - rx_center
        if d @ d <= (geometry.R_r + a) ** 2:
            return False
    return all(np.linalg.norm(c - s.c) > a + s.radius for s in others)


def _place(params: EnvParams, geometry: Geometry, count: int, existing: list[Scatterer], next_id: int,
           rng: np.random.Generator) -> tuple[list[Scatterer], int]:
    if count == 0:
        return [], next_id
    placed = list(existing)
    new = []
    center, frame, rx = placement_center(params, geometry), placement_frame(geometry), geometry.rx_center
    scaled = frame * params.sigmas[:, None]
    for _ in range(count):
        for _attempt in range(params.max_attempts):
            c = center + rng.standard_normal(3) @ scaled
            if _fits(c, params.radius, geometry, rx, placed):
                break
        else:
            raise PackingError(f"could not place scatterer {next_id} after {params.max_attempts} attempts")
        s = Scatterer(tuple(float(x) for x in c), params.radius, id=next_id)
        placed.append(s)
        new.append(s)
        next_id += 1
    return new, next_id


def in_rx_region(geometry: Geometry, points, rel_tol: float = 1e-12) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    slack = geometry.R_r * (1 + rel_tol)
    if geometry.rx_kind == "shell":
        return np.abs(np.linalg.norm(pts, axis=1) - geometry.D) <= slack
    return np.linalg.norm(pts - geometry.rx_center, axis=1) <= slack


def draw_users(geometry: Geometry, K: int, rng: np.random.Generator, fill: float = 1.0) -> np.ndarray:
    """``K`` points uniform in the receive region.

    For the ball this is the ball of radius ``fill * R_r`` about the Rx centre;
    for the shell it is ``|r - D| <= fill * R_r`` over all directions.
    """
    v = rng.standard_normal((K, 3))
    v /= np.linalg.norm(v, axis=1)[:, None]
    if geometry.rx_kind == "shell":
        lo, hi = (geometry.D - fill * geometry.R_r) ** 3, (geometry.D + fill * geometry.R_r) ** 3
        r = rng.uniform(lo, hi, (K, 1)) ** (1 / 3)
        return r * v
    r = fill * geometry.R_r * rng.uniform(0.0, 1.0, (K, 1)) ** (1 / 3)
    return geometry.rx_center + r * v


def draw_scene(params: EnvParams, geometry: Geometry, rng: np.random.Generator | None = None,
               users=None) -> Scene:
    """Fresh scene with ``Poisson(Q_mean)`` scatterers placed by rejection sampling."""
    rng = np.random.default_rng(params.seed) if rng is None else rng
    count = int(rng.poisson(params.Q_mean))
    scs, nid = _place(params, geometry, count, [], 0, rng)
    u = np.zeros((0, 3)) if users is None else np.atleast_2d(np.asarray(users, dtype=float)).reshape(-1, 3)
    if u.size and not np.all(in_rx_region(geometry, u)):
        raise DomainError("users must lie inside the receive region")
    return Scene(geometry, tuple(scs), u, params, 0.0, nid)


def realization_streams(rng: np.random.Generator | int | None, n: int) -> list[np.random.Generator]:
    """One independent child stream per realization.

    Stream ``i`` depends only on the root seed and ``i``, so any split of the
    ensemble across workers reproduces the same realizations.
    """
    if isinstance(rng, np.random.Generator):
        ss = np.random.SeedSequence(int(rng.integers(0, 2**63)))
    else:
        ss = np.random.SeedSequence(rng)
    return [np.random.default_rng(s) for s in ss.spawn(n)]


def survival_probability(params: EnvParams, dt: float = 0.0, delta_t: float = 0.0, delta_r: float = 0.0,
                         beta_T: float = 0.0, beta_R: float = 0.0) -> float:
    """Probability that a scatterer survives a time step and Tx/Rx sampling displacements."""
    if dt < 0 or delta_t < 0 or delta_r < 0:
        raise DomainError("time and displacement increments must be non-negative")
    lam, dc = params.lambda_D, params.D_c
    time = -lam * params.P_f * (params.dv_R + params.dv_T) * dt / dc
    space = -lam * (delta_t * np.cos(beta_T) + delta_r * np.cos(beta_R)) / dc
    return float(np.clip(np.exp(time + space), 0.0, 1.0))


def expected_births(params: EnvParams, p_sur: float) -> float:
    return params.equilibrium_count * (1.0 - p_sur)


def evolve(scene: Scene, params: EnvParams | None = None, dt: float = 0.0, delta_t: float = 0.0,
           delta_r: float = 0.0, rng: np.random.Generator | None = None, *, beta_T: float = 0.0,
           beta_R: float = 0.0) -> Scene:
    """Advance the birth-death process; survivors keep their ids, dead scatterers are dropped."""
    params = scene.params if params is None else params
    rng = np.random.default_rng(params.seed) if rng is None else rng
    p = survival_probability(params, dt, delta_t, delta_r, beta_T, beta_R)
    alive = scene.alive
    if p >= 1.0:
        return replace(scene, t=scene.t + dt, params=params)
    keep = rng.uniform(size=len(alive)) < p
    survivors = [s for s, k in zip(alive, keep) if k]
    births = int(rng.poisson(expected_births(params, p)))
    new, nid = _place(params, scene.geometry, births, survivors, scene.next_id, rng)
    return replace(scene, scatterers=tuple(survivors + new), t=scene.t + dt, next_id=nid, params=params)
