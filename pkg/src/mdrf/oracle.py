"""Closed-form Taylor-Green vortex for the 2D system and synthetic observations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .geometry import Domain2D

PI = math.pi
VARIABLES_2D = ("tau", "v", "w", "p")
DEFAULT_OBSERVED = ("tau", "v", "w")


@dataclass(frozen=True)
class TaylorGreenParams:
    eta: float = 0.01
    zeta: float = 0.01
    zeta_tau: float = 0.02

    def __post_init__(self):
        for k in ("eta", "zeta", "zeta_tau"):
            if not math.isfinite(getattr(self, k)):
                raise ValueError(f"{k} must be finite")


def _fields(x, z, t, p: TaylorGreenParams, sin, cos, exp) -> dict:
    visc = p.eta + p.zeta
    decay_v = exp(t * (-4 * PI**2 * visc))
    decay_p = exp(t * (-8 * PI**2 * visc))
    decay_tau = exp(t * (-4 * PI**2 * p.zeta_tau))
    return {
        "tau": sin(z * (2 * PI)) * decay_tau,
        "v": -(sin(x * (2 * PI)) * cos(z * (2 * PI))) * decay_v,
        "w": cos(x * (2 * PI)) * sin(z * (2 * PI)) * decay_v,
        "p": 0.25 * cos(x * (4 * PI)) * decay_p + (1 / (2 * PI)) * cos(z * (2 * PI)) * decay_tau,
    }


def exact(points, p: TaylorGreenParams = TaylorGreenParams()) -> dict[str, np.ndarray]:
    """Closed-form fields at ``(x, z, t)`` points; returns arrays keyed by variable."""
    pts = np.asarray(points, dtype=float)
    x, z, t = pts[..., 0], pts[..., 1], pts[..., 2]
    return _fields(x, z, t, p, np.sin, np.cos, np.exp)


def exact_jets(points, p: TaylorGreenParams = TaylorGreenParams(), needed=("t", "x", "z", "xx", "zz")) -> dict:
    """The same closed forms pushed through the jet engine (exact input derivatives)."""
    req = ad.DerivRequest.parse(needed, ("x", "z", "t"))
    cj = ad.coordinate_jets(np.asarray(points, dtype=float), ("x", "z", "t"), req)
    return _fields(cj["x"], cj["z"], cj["t"], p, ad.sin, ad.cos, ad.exp)


def velocity_decay(t: float, p: TaylorGreenParams = TaylorGreenParams()) -> float:
    return math.exp(-4 * PI**2 * (p.eta + p.zeta) * t)


@dataclass(frozen=True)
class RoundedRect:
    """Rounded rectangle in the (x, z) plane, extruded over all times."""

    cx: float
    cz: float
    half_x: float
    half_z: float
    radius: float = 0.0

    def __post_init__(self):
        if self.half_x <= 0 or self.half_z <= 0:
            raise ValueError("rounded rectangle half sizes must be positive")
        if not 0 <= self.radius <= min(self.half_x, self.half_z):
            raise ValueError("corner radius must lie in [0, min(half_x, half_z)]")

    def contains(self, x, z) -> np.ndarray:
        # distance from the inner (radius-shrunk) rectangle
        dx = np.maximum(np.abs(np.asarray(x) - self.cx) - (self.half_x - self.radius), 0.0)
        dz = np.maximum(np.abs(np.asarray(z) - self.cz) - (self.half_z - self.radius), 0.0)
        return dx * dx + dz * dz <= self.radius**2 + 1e-15

    def area(self) -> float:
        return 4 * self.half_x * self.half_z - (4 - PI) * self.radius**2


@dataclass(frozen=True)
class DataRegion:
    """Subdomain in which observations are generated.

    With no rectangles the region is the whole domain box.
    """

    domain: Domain2D = Domain2D()
    rects: tuple[RoundedRect, ...] = ()

    def contains(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inside = self.domain.contains(pts)
        if self.rects:
            mask = np.zeros(len(pts), dtype=bool)
            for r in self.rects:
                mask |= r.contains(pts[:, 0], pts[:, 1])
            inside &= mask
        return inside

    def measure(self) -> float:
        if not self.rects:
            return self.domain.measure()
        # rectangles are assumed disjoint and inside the box
        return sum(r.area() for r in self.rects) * self.domain.t_range.length

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        lo = np.array([iv.lo for iv in self.domain.ranges()])
        hi = np.array([iv.hi for iv in self.domain.ranges()])
        out = np.empty((0, 3))
        while len(out) < n:
            cand = lo + (hi - lo) * rng.random((max(2 * (n - len(out)), 64), 3))
            out = np.concatenate([out, cand[self.contains(cand)]])
        return out[:n]


@dataclass
class ObservationSet:
    """Scattered single-variable measurements.

    ``points`` is ``(M, D)`` in physical coordinates, ``var`` and ``value``
    have length ``M``; ``weight`` is optional per-record quadrature weight.
    """

    coords: tuple[str, ...]
    points: np.ndarray
    var: np.ndarray
    value: np.ndarray
    weight: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.var = np.asarray(self.var, dtype=object)
        self.value = np.asarray(self.value, dtype=float)
        if not (len(self.points) == len(self.var) == len(self.value)):
            raise ValueError("observation arrays have mismatched lengths")
        if self.weight is not None:
            self.weight = np.asarray(self.weight, dtype=float)
            if np.any(self.weight <= 0):
                raise ValueError("observation weights must be positive")

    def __len__(self) -> int:
        return len(self.value)

    @property
    def variables(self) -> list[str]:
        return sorted(set(self.var.tolist()))

    def select(self, var: str) -> tuple[np.ndarray, np.ndarray]:
        m = self.var == var
        return self.points[m], self.value[m]

    def weights(self, measure: float) -> np.ndarray:
        """Per-record weights; default gives each variable total weight ``measure``."""
        if self.weight is not None:
            return self.weight
        w = np.empty(len(self))
        for v in self.variables:
            m = self.var == v
            w[m] = measure / m.sum()
        return w


def generate_observations(
    n: int,
    seed: int,
    variables: Sequence[str] = DEFAULT_OBSERVED,
    noise_sd: float = 0.0,
    region: DataRegion = DataRegion(),
    params: TaylorGreenParams = TaylorGreenParams(),
) -> ObservationSet:
    """``n`` uniform sample points in ``region``, one record per point and variable."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    variables = tuple(variables)
    if not variables:
        raise ValueError("at least one variable must be observed")
    bad = set(variables) - set(VARIABLES_2D)
    if bad:
        raise ValueError(f"unknown variables {sorted(bad)}; choose from {VARIABLES_2D}")
    if noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")
    rng = np.random.default_rng(seed)
    pts = region.sample(n, rng)
    truth = exact(pts, params)
    values = np.stack([truth[v] for v in variables], axis=1)
    if noise_sd > 0:
        values = values + rng.normal(0.0, noise_sd, size=values.shape)
    k = len(variables)
    return ObservationSet(
        ("x", "z", "t"),
        np.repeat(pts, k, axis=0),
        np.tile(np.array(variables, dtype=object), n),
        values.reshape(-1),
    )


# --- small synthetic spherical fixture ---------------------------------------

VARIABLES_3D = ("tau", "sal", "w", "v_theta", "v_phi", "p")


def sphere_fields(points, r_e: float = 6.371e6, depth_scale: float = 2000.0) -> dict[str, np.ndarray]:
    """Smooth analytic fields on ``(r, theta, phi, t)`` for smoke runs.

    They are not solutions of the spherical system; they only give the
    reduced-scale 3D pipeline something smooth and labelled to fit.
    Velocity is finite at the poles in Cartesian form.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    r, th, ph, t = pts.T
    d = (r_e - r) / depth_scale
    return {
        "tau": 10.0 + 4.0 * np.sin(th) * np.cos(ph) * np.exp(-d) - 0.5 * t,
        "sal": 35.0 + 0.5 * np.cos(th) + 0.1 * d,
        "w": np.zeros_like(r),
        "v_theta": 0.1 * np.sin(ph),
        "v_phi": 0.1 * np.cos(th) * np.cos(ph) + 0.05 * np.sin(th),
        "p": 0.2 * d * (1 + 0.1 * np.cos(th)),
    }


def generate_sphere_observations(
    domain,
    n: int,
    seed: int,
    variables: Sequence[str] = ("tau", "sal", "v_theta", "v_phi"),
    noise_sd: float = 0.0,
) -> ObservationSet:
    """``n`` uniform points in the spherical ``domain``; one record per point and variable."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    bad = set(variables) - set(VARIABLES_3D)
    if bad or not variables:
        raise ValueError(f"variables must be a nonempty subset of {VARIABLES_3D}")
    rng = np.random.default_rng(seed)
    lo = np.array([iv.lo for iv in domain.ranges()])
    hi = np.array([iv.hi for iv in domain.ranges()])
    pts = lo + (hi - lo) * rng.random((n, 4))
    truth = sphere_fields(pts, domain.r_e)
    values = np.stack([truth[v] for v in variables], axis=1)
    if noise_sd > 0:
        values = values + rng.normal(0.0, noise_sd, size=values.shape)
    k = len(variables)
    return ObservationSet(
        ("r", "theta", "phi", "t"),
        np.repeat(pts, k, axis=0),
        np.tile(np.array(variables, dtype=object), n),
        values.reshape(-1),
    )
