"""Collocation points and Monte Carlo quadrature weights.

Weights follow the uniform Monte Carlo convention ``measure / count`` so the
weights of every set sum to the measure of the region it samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .physics import BOUNDARY_TAGS

MODES = ("uniform", "gridded")


@dataclass
class PointSet:
    points: np.ndarray
    weights: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.points) != len(self.weights):
            raise ValueError("points and weights differ in length")
        if np.any(self.weights <= 0):
            raise ValueError("quadrature weights must be positive")

    def __len__(self):
        return len(self.points)

    def subset(self, mask) -> "PointSet":
        n = None if self.normals is None else self.normals[mask]
        return PointSet(self.points[mask], self.weights[mask], n)


@dataclass
class CollocationSet:
    interior: PointSet
    boundary: dict[str, PointSet] = field(default_factory=dict)


def _bounds(domain):
    rs = domain.ranges()
    return np.array([iv.lo for iv in rs]), np.array([iv.hi for iv in rs])


def _open_uniform(rng: np.random.Generator, n: int, lo, hi) -> np.ndarray:
    # rng.random is in [0, 1); reject exact zeros so points are strictly inside
    u = rng.random((n, len(lo)))
    while np.any(u == 0.0):
        u[u == 0.0] = rng.random(int(np.sum(u == 0.0)))
    return lo + (hi - lo) * u


def lattice_shape(n: int, dim: int) -> tuple[int, ...]:
    """Per-axis counts of a tensor lattice with exactly ``n`` points (as even as possible)."""
    side = round(n ** (1.0 / dim))
    if side**dim == n:
        return (side,) * dim
    # fall back to a factorization of n spread over the axes
    shape = [1] * dim
    rem = n
    for k in range(dim - 1):
        target = rem ** (1.0 / (dim - k))
        best = min((d for d in range(1, rem + 1) if rem % d == 0), key=lambda d: abs(d - target))
        shape[k] = best
        rem //= best
    shape[-1] = rem
    return tuple(shape)


def _cell_centers(lo: float, hi: float, k: int) -> np.ndarray:
    return lo + (hi - lo) * (np.arange(k) + 0.5) / k


def sample_interior(domain, n: int, seed: int, mode: str = "uniform") -> PointSet:
    """``n`` interior points with weights ``measure / n``.

    ``gridded`` places points at the cell centres of a tensor lattice.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    lo, hi = _bounds(domain)
    if mode == "uniform":
        pts = _open_uniform(np.random.default_rng(seed), n, lo, hi)
    else:
        shape = lattice_shape(n, len(lo))
        axes = [_cell_centers(lo[k], hi[k], shape[k]) for k in range(len(lo))]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(lo))
    return PointSet(pts, np.full(n, domain.measure() / n))


def _faces(domain):
    """(tag, coordinate index, bound value, outward normal sign) of each boundary face."""
    coords = list(domain.coords)
    v = coords.index(domain.vertical)
    faces = [
        ("surface", v, domain.range_of(domain.vertical).hi, 1.0),
        ("bottom", v, domain.range_of(domain.vertical).lo, -1.0),
    ]
    for h in domain.horizontal:
        if h == "phi" and getattr(domain, "phi_periodic", False):
            continue
        k = coords.index(h)
        faces.append(("lateral", k, domain.range_of(h).lo, -1.0))
        faces.append(("lateral", k, domain.range_of(h).hi, 1.0))
    faces.append(("initial", coords.index("t"), domain.range_of("t").lo, 0.0))
    return faces


def sample_boundary(domain, n_per_piece: int, seed: int) -> dict[str, PointSet]:
    """Uniform points on every boundary piece, keyed by tag.

    A piece made of several faces (the lateral walls) gets ``n_per_piece``
    points in total, split across faces in proportion to face measure.  On
    3D lateral faces ``normals`` holds the outward unit normal as
    ``(n_theta, n_phi)`` tangent components.
    """
    if n_per_piece < 1:
        raise ValueError(f"n_per_piece must be >= 1, got {n_per_piece}")
    rng = np.random.default_rng(seed)
    lo, hi = _bounds(domain)
    extents = hi - lo
    out: dict[str, PointSet] = {}
    faces = _faces(domain)
    for tag in BOUNDARY_TAGS:
        tf = [f for f in faces if f[0] == tag]
        if not tf:
            continue
        measures = np.array([np.prod(np.delete(extents, k)) for _, k, _, _ in tf])
        total = measures.sum()
        counts = np.floor(n_per_piece * measures / total).astype(int)
        counts[: n_per_piece - counts.sum()] += 1
        pts_list, normals = [], []
        for (_, k, bound, sign), cnt in zip(tf, counts):
            if cnt == 0:
                continue
            p = _open_uniform(rng, cnt, lo, hi)
            p[:, k] = bound
            pts_list.append(p)
            nrm = np.zeros((cnt, 2))
            if domain.mode == "3d" and tag == "lateral":
                nrm[:, 0 if domain.coords[k] == "theta" else 1] = sign
            normals.append(nrm)
        pts = np.concatenate(pts_list)
        nrm = np.concatenate(normals) if domain.mode == "3d" and tag == "lateral" else None
        out[tag] = PointSet(pts, np.full(len(pts), total / len(pts)), nrm)
    return out


def exclude_poles(ps: PointSet, theta_col: int = 1, margin: float = 1e-3) -> PointSet:
    th = ps.points[:, theta_col]
    return ps.subset((th > margin) & (th < math.pi - margin))


def collocation(domain, n_interior: int, n_per_piece: int, seed: int, mode: str = "uniform") -> CollocationSet:
    return CollocationSet(
        sample_interior(domain, n_interior, seed, mode),
        sample_boundary(domain, n_per_piece, seed + 1),
    )
