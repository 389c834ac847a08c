"""Equation domains, coordinate normalization and sphere rotations.

Two coordinate conventions are used throughout the package:

* 2D mode: ``(x, z, t)`` Cartesian, dimensionless, ``z`` vertical.
* 3D mode: ``(r, theta, phi, t)`` with ``r = r_a + r_e`` in metres,
  ``theta`` the polar angle measured from the north pole and ``phi``
  the azimuthal angle (longitude) in ``[0, 2*pi)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

EARTH_RADIUS = 6.371e6


class OutOfDomainError(ValueError):
    """A point lies outside the domain a transform was built for."""


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ValueError(f"interval bounds must be finite, got [{self.lo}, {self.hi}]")
        if not self.lo < self.hi:
            raise ValueError(f"empty interval [{self.lo}, {self.hi}]")

    @property
    def length(self) -> float:
        return self.hi - self.lo

    def contains(self, x, tol: float = 1e-12):
        slack = tol * max(1.0, abs(self.lo), abs(self.hi))
        return (x >= self.lo - slack) & (x <= self.hi + slack)

    @classmethod
    def of(cls, value) -> "Interval":
        if isinstance(value, Interval):
            return value
        lo, hi = value
        return cls(float(lo), float(hi))


class _BoxDomain:
    """Shared behaviour of the axis-aligned space-time boxes."""

    coords: tuple[str, ...]
    vertical: str
    horizontal: tuple[str, ...]
    time = "t"

    def ranges(self) -> list[Interval]:
        return [getattr(self, f"{c}_range") for c in self.coords]

    def range_of(self, coord: str) -> Interval:
        return getattr(self, f"{coord}_range")

    @property
    def dim(self) -> int:
        return len(self.coords)

    def measure(self) -> float:
        return float(np.prod([iv.length for iv in self.ranges()]))

    def contains(self, points, tol: float = 1e-12) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        inside = np.ones(len(points), dtype=bool)
        for k, iv in enumerate(self.ranges()):
            inside &= iv.contains(points[:, k], tol)
        return inside

    def normalizer(self) -> "Normalizer":
        return Normalizer.from_domain(self)


@dataclass(frozen=True)
class Domain2D(_BoxDomain):
    """Dimensionless box for the simplified 2D system; defaults to the unit cube."""

    x_range: Interval = Interval(0.0, 1.0)
    z_range: Interval = Interval(0.0, 1.0)
    t_range: Interval = Interval(0.0, 1.0)

    coords = ("x", "z", "t")
    vertical = "z"
    horizontal = ("x",)
    mode = "2d"

    def __post_init__(self):
        for name in ("x_range", "z_range", "t_range"):
            object.__setattr__(self, name, Interval.of(getattr(self, name)))

    def to_dict(self) -> dict:
        return {f"{c}_range": [iv.lo, iv.hi] for c, iv in zip(self.coords, self.ranges())}


@dataclass(frozen=True)
class Domain3D(_BoxDomain):
    """Spherical shell sector plus time.

    ``r_range`` is absolute radial distance; depth below the surface is
    ``r_e - r``.  ``phi_range`` equal to ``[0, 2*pi]`` is treated as periodic
    (no lateral boundary in longitude).
    """

    r_range: Interval = Interval(EARTH_RADIUS - 2000.0, EARTH_RADIUS)
    theta_range: Interval = Interval(0.1, math.pi - 0.1)
    phi_range: Interval = Interval(0.0, 2 * math.pi)
    t_range: Interval = Interval(0.0, 1.0)
    r_e: float = EARTH_RADIUS

    coords = ("r", "theta", "phi", "t")
    vertical = "r"
    horizontal = ("theta", "phi")
    mode = "3d"

    def __post_init__(self):
        for name in ("r_range", "theta_range", "phi_range", "t_range"):
            object.__setattr__(self, name, Interval.of(getattr(self, name)))
        if self.r_range.hi > self.r_e * (1 + 1e-12):
            raise ValueError("r_range must not extend above the sea surface r_e")
        if self.theta_range.lo < 0 or self.theta_range.hi > math.pi:
            raise ValueError("theta_range must lie within [0, pi]")
        if self.phi_range.lo < 0 or self.phi_range.hi > 2 * math.pi + 1e-12:
            raise ValueError("phi_range must lie within [0, 2*pi]")

    @property
    def phi_periodic(self) -> bool:
        return self.phi_range.lo <= 1e-12 and self.phi_range.hi >= 2 * math.pi - 1e-12

    def to_dict(self) -> dict:
        out = {f"{c}_range": [iv.lo, iv.hi] for c, iv in zip(self.coords, self.ranges())}
        out["r_e"] = self.r_e
        return out


def domain_from_dict(mode: str, data: dict):
    if mode == "2d":
        return Domain2D(**{k: Interval.of(v) for k, v in data.items()})
    if mode == "3d":
        kw = {k: (Interval.of(v) if k.endswith("_range") else float(v)) for k, v in data.items()}
        return Domain3D(**kw)
    raise ValueError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class Normalizer:
    """Per-coordinate affine maps ``[lo, hi] -> [-1, 1]``."""

    coords: tuple[str, ...]
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    @classmethod
    def from_domain(cls, domain) -> "Normalizer":
        rs = domain.ranges()
        return cls(tuple(domain.coords), tuple(iv.lo for iv in rs), tuple(iv.hi for iv in rs))

    @classmethod
    def from_bounds(cls, coords: Sequence[str], lo, hi) -> "Normalizer":
        for a, b in zip(lo, hi):
            Interval(float(a), float(b))
        return cls(tuple(coords), tuple(float(a) for a in lo), tuple(float(b) for b in hi))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lo) + np.asarray(self.hi))

    @property
    def half_width(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.hi) - np.asarray(self.lo))

    @property
    def scale(self) -> np.ndarray:
        """d(normalized)/d(physical) per coordinate."""
        return 1.0 / self.half_width

    def normalize(self, points, check: bool = True, tol: float = 1e-12) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if check:
            lo, hi = np.asarray(self.lo), np.asarray(self.hi)
            slack = tol * np.maximum(1.0, np.maximum(np.abs(lo), np.abs(hi)))
            bad = np.any((points < lo - slack) | (points > hi + slack), axis=-1)
            if np.any(bad):
                first = np.atleast_2d(points)[np.atleast_1d(bad)][0]
                raise OutOfDomainError(
                    f"point {first.tolist()} outside normalizer box "
                    f"{list(zip(self.coords, self.lo, self.hi))}"
                )
        return (points - self.center) / self.half_width

    def denormalize(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) * self.half_width + self.center

    def to_dict(self) -> dict:
        return {"coords": list(self.coords), "lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_dict(cls, data: dict) -> "Normalizer":
        return cls(tuple(data["coords"]), tuple(map(float, data["lo"])), tuple(map(float, data["hi"])))


def normalize(point, n: Normalizer, check: bool = True) -> np.ndarray:
    return n.normalize(point, check=check)


def denormalize(point, n: Normalizer) -> np.ndarray:
    return n.denormalize(point)


# --- sphere -----------------------------------------------------------------


def to_cartesian(theta, phi) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def from_cartesian(xyz) -> tuple[np.ndarray, np.ndarray]:
    xyz = np.asarray(xyz, dtype=float)
    x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]
    # atan2 stays accurate near the poles where arccos(z) does not
    theta = np.arctan2(np.hypot(x, y), z)
    phi = np.mod(np.arctan2(y, x), 2 * math.pi)
    # mod can return exactly 2*pi for tiny negative angles
    phi = np.where(phi >= 2 * math.pi, 0.0, phi)
    return theta, phi


@dataclass(frozen=True)
class Rotation:
    """Rotation of the sphere about the equatorial axis through longitudes +-pi/2.

    With this axis the poles travel along the prime meridian; a quarter turn
    takes the north pole to ``(theta, phi) = (pi/2, 0)``.
    """

    angle: float = 0.0
    matrix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        c, s = math.cos(self.angle), math.sin(self.angle)
        m = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        object.__setattr__(self, "matrix", m)

    def inverse(self) -> "Rotation":
        return Rotation(-self.angle)

    def apply_cartesian(self, xyz) -> np.ndarray:
        return np.asarray(xyz, dtype=float) @ self.matrix.T

    @property
    def is_identity(self) -> bool:
        return self.angle == 0.0


def rotate(theta, phi, rot: Rotation):
    """Map ``(theta, phi)`` to the polar/azimuthal angles in the rotated chart."""
    if rot.is_identity:
        return np.asarray(theta, dtype=float), np.asarray(phi, dtype=float)
    return from_cartesian(rot.apply_cartesian(to_cartesian(theta, phi)))


def inverse_rotate(theta_r, phi_r, rot: Rotation):
    return rotate(theta_r, phi_r, rot.inverse())


def tangent_basis(theta, phi) -> tuple[np.ndarray, np.ndarray]:
    """Unit vectors ``e_theta`` and ``e_phi`` in Cartesian components."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    ct, st, cp, sp = np.cos(theta), np.sin(theta), np.cos(phi), np.sin(phi)
    e_theta = np.stack([ct * cp, ct * sp, -st], axis=-1)
    e_phi = np.stack([-sp, cp, np.zeros_like(phi)], axis=-1)
    return e_theta, e_phi


def rotate_tangent(theta, phi, v_theta, v_phi, rot: Rotation):
    """Re-express a tangent vector at ``(theta, phi)`` in the rotated chart's basis.

    Returns ``(v_theta_r, v_phi_r)``.  Undefined exactly at either chart's poles.
    """
    if rot.is_identity:
        return np.asarray(v_theta, dtype=float), np.asarray(v_phi, dtype=float)
    e_t, e_p = tangent_basis(theta, phi)
    vec = np.asarray(v_theta)[..., None] * e_t + np.asarray(v_phi)[..., None] * e_p
    vec_r = rot.apply_cartesian(vec)
    theta_r, phi_r = rotate(theta, phi, rot)
    e_tr, e_pr = tangent_basis(theta_r, phi_r)
    return np.sum(vec_r * e_tr, axis=-1), np.sum(vec_r * e_pr, axis=-1)


def rotation_schedule(n_ro: int) -> list[Rotation]:
    """``n_ro`` rotations evenly spaced over ``[0, pi)``, the first the identity."""
    if int(n_ro) != n_ro or n_ro < 1:
        raise ValueError(f"n_ro must be a positive integer, got {n_ro!r}")
    return [Rotation(k * math.pi / n_ro) for k in range(int(n_ro))]


def great_circle_distance(theta1, phi1, theta2, phi2):
    a = to_cartesian(theta1, phi1)
    b = to_cartesian(theta2, phi2)
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    return np.arctan2(cross, np.sum(a * b, axis=-1))
