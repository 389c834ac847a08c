"""Rotated-chart ensembles on the sphere and logistic polar-angle fusion.

Each sub-learner sees the sphere through a rotation that moves the poles of
the geographic chart onto its equator.  Predictions are fused with weights
that depend on the query point's polar angle in each chart.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import physics
from .autodiff import ContractViolation
from .geometry import Domain3D, Normalizer, Rotation, inverse_rotate, rotate, rotate_tangent, rotation_schedule
from .network import ModelParams, NetworkSpec, forward_fields, params_from_snapshot, snapshot_dict
from .oracle import ObservationSet
from .sampling import CollocationSet, PointSet, collocation, exclude_poles
from .training import Predictor, Problem3D, TrainConfig, TrainTrace, train

VARIANTS = ("paper-verbatim", "pole-symmetric")
VECTOR_PAIRS = {
    "delta_v_theta": "delta_v_phi",
    "i_theta": "i_phi",
}
ENSEMBLE_FORMAT = "mdrf-ensemble"


@dataclass(frozen=True)
class EnsembleSpec:
    n_ro: int = 2
    weight_variant: str = "paper-verbatim"

    def __post_init__(self):
        if int(self.n_ro) != self.n_ro or self.n_ro < 1:
            raise ValueError(f"n_ro must be an integer >= 1, got {self.n_ro!r}")
        if self.weight_variant not in VARIANTS:
            raise ValueError(f"weight_variant must be one of {VARIANTS}")


def _logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


def weight(theta_r, variant: str = "paper-verbatim"):
    """Fusion weight for a point at chart polar angle ``theta_r``."""
    th = np.asarray(theta_r, dtype=float)
    if variant == "paper-verbatim":
        out = _logistic(10.0 * (th / math.pi - 0.5))
    elif variant == "pole-symmetric":
        out = _logistic(10.0 * (2.0 * np.minimum(th, math.pi - th) / math.pi - 0.5))
    else:
        raise ValueError(f"unknown weight variant {variant!r}")
    return float(out) if out.ndim == 0 else out


def fuse(predictions: Sequence[dict], thetas: Sequence, variant: str = "paper-verbatim") -> dict:
    """Weighted mean of per-chart field dicts.

    ``thetas[r]`` holds each point's polar angle in chart ``r``.  The result
    is a convex combination per field and point; a single prediction is
    returned unchanged.
    """
    if not predictions:
        raise ValueError("fuse needs at least one prediction")
    if len(predictions) != len(thetas):
        raise ValueError("one theta array per prediction is required")
    if len(predictions) == 1:
        return {k: v for k, v in predictions[0].items()}
    m = [np.asarray(weight(t, variant), dtype=float) for t in thetas]
    msum = sum(m)
    if np.any(msum <= 0):
        raise ZeroDivisionError("fusion weights sum to zero")
    out = {}
    for k in predictions[0]:
        vals = [np.asarray(p[k], dtype=float) for p in predictions]
        base = vals[0]
        # written relative to the first chart so equal inputs come back exactly
        acc = sum(mr * (v - base) for mr, v in zip(m[1:], vals[1:]))
        fused = base + acc / msum
        out[k] = np.clip(fused, np.minimum.reduce(vals), np.maximum.reduce(vals))
    return out


# --- chart mapping ------------------------------------------------------------


def to_chart(points: np.ndarray, rot: Rotation) -> np.ndarray:
    """Geographic ``(r, theta, phi, t)`` points expressed in the rotated chart."""
    pts = np.array(points, dtype=float, copy=True)
    if not rot.is_identity:
        pts[:, 1], pts[:, 2] = rotate(pts[:, 1], pts[:, 2], rot)
    return pts


def from_chart(points: np.ndarray, rot: Rotation) -> np.ndarray:
    return to_chart(points, rot.inverse())


def chart_normalizer(domain: Domain3D, rot: Rotation) -> Normalizer:
    """The identity chart keeps the domain box; rotated charts span the whole sphere."""
    if rot.is_identity:
        return domain.normalizer()
    r, t = domain.r_range, domain.t_range
    return Normalizer.from_bounds(("r", "theta", "phi", "t"), [r.lo, 0.0, 0.0, t.lo], [r.hi, math.pi, 2 * math.pi, t.hi])


def _pair_vectors(obs: ObservationSet):
    """Index pairs (i_theta, i_phi) of velocity records sharing a point."""
    it = np.flatnonzero(obs.var == "v_theta")
    ip = np.flatnonzero(obs.var == "v_phi")
    key = lambda i: tuple(obs.points[i].tolist())
    lookup = {key(i): i for i in ip}
    pairs = []
    for i in it:
        j = lookup.pop(key(i), None)
        if j is None:
            raise ContractViolation(f"v_theta record #{i} has no v_phi partner at the same point")
        pairs.append((i, j))
    if lookup:
        raise ContractViolation(f"v_phi record #{next(iter(lookup.values()))} has no v_theta partner")
    return pairs


def rotate_observations(obs: ObservationSet, rot: Rotation) -> ObservationSet:
    """Move observation points into the chart; horizontal velocity is re-expressed in its basis."""
    if rot.is_identity:
        return obs
    pts = to_chart(obs.points, rot)
    val = obs.value.copy()
    for i, j in _pair_vectors(obs):
        th, ph = obs.points[i, 1], obs.points[i, 2]
        val[i], val[j] = rotate_tangent(th, ph, obs.value[i], obs.value[j], rot)
    return ObservationSet(("r", "theta", "phi", "t"), pts, obs.var.copy(), val, obs.weight)


def rotate_collocation(colloc: CollocationSet, c: physics.PdeConstants3D, rot: Rotation, margin: float):
    """Chart collocation set plus boundary targets evaluated at the geographic points."""
    interior = exclude_poles(_rotate_ps(colloc.interior, rot), margin=margin)
    boundary, targets = {}, {}
    for tag, ps in colloc.boundary.items():
        tg = physics.boundary_targets_3d(ps.points, c, tag)
        chart = _rotate_ps(ps, rot)
        th, ph = ps.points[:, 1], ps.points[:, 2]
        for a, b in VECTOR_PAIRS.items():
            if a in tg:
                tg[a], tg[b] = rotate_tangent(th, ph, tg[a], tg[b], rot)
        keep = (chart.points[:, 1] > margin) & (chart.points[:, 1] < math.pi - margin)
        boundary[tag] = chart.subset(keep)
        targets[tag] = {k: v[keep] for k, v in tg.items()}
    return CollocationSet(interior, boundary), targets


def _rotate_ps(ps: PointSet, rot: Rotation) -> PointSet:
    pts = to_chart(ps.points, rot)
    normals = ps.normals
    if normals is not None and not rot.is_identity:
        nt, np_ = rotate_tangent(ps.points[:, 1], ps.points[:, 2], normals[:, 0], normals[:, 1], rot)
        normals = np.stack([nt, np_], axis=1)
    return PointSet(pts, ps.weights, normals)


# --- fused predictor ----------------------------------------------------------


@dataclass
class SubLearner:
    rotation: Rotation
    params: ModelParams
    normalizer: Normalizer
    trace: TrainTrace | None = None


class FusedPredictor:
    """Maps geographic query points through every chart and fuses the outputs."""

    mode = "3d"

    def __init__(self, learners: Sequence[SubLearner], spec: EnsembleSpec, constants: physics.PdeConstants3D | None = None):
        if not learners:
            raise ValueError("an ensemble needs at least one sub-learner")
        self.learners = list(learners)
        self.spec = spec
        self.constants = constants

    @property
    def fields(self):
        return self.learners[0].params.spec.fields

    def chart_predictions(self, points, check: bool = True):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        preds, thetas = [], []
        for sl in self.learners:
            cp = to_chart(pts, sl.rotation)
            out = Predictor(sl.params, sl.normalizer, "3d", check=check)(cp)
            if not sl.rotation.is_identity and "v_theta" in out and "v_phi" in out:
                # back to the geographic basis, evaluated at the chart point
                out["v_theta"], out["v_phi"] = rotate_tangent(cp[:, 1], cp[:, 2], out["v_theta"], out["v_phi"], sl.rotation.inverse())
            preds.append(out)
            thetas.append(cp[:, 1])
        return preds, thetas

    def __call__(self, points, check: bool = True) -> dict[str, np.ndarray]:
        preds, thetas = self.chart_predictions(points, check)
        return fuse(preds, thetas, self.spec.weight_variant)

    def to_dict(self) -> dict:
        return {
            "format": ENSEMBLE_FORMAT,
            "version": 1,
            "variant": self.spec.weight_variant,
            "angles": [repr(sl.rotation.angle) for sl in self.learners],
            "learners": [snapshot_dict(sl.params, sl.normalizer, "3d") for sl in self.learners],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, data: dict) -> "FusedPredictor":
        if data.get("format") != ENSEMBLE_FORMAT:
            raise ValueError("not an ensemble snapshot")
        learners = []
        for ang, snap in zip(data["angles"], data["learners"]):
            params, nz, _ = params_from_snapshot(snap)
            learners.append(SubLearner(Rotation(float(ang)), params, nz))
        return cls(learners, EnsembleSpec(len(learners), data["variant"]))

    @classmethod
    def load(cls, path) -> "FusedPredictor":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class SubLearnerError(RuntimeError):
    def __init__(self, index: int, rotation: Rotation, cause: Exception):
        super().__init__(f"sub-learner {index} (rotation {rotation.angle:.6g} rad) failed: {cause}")
        self.index = index
        self.rotation = rotation
        self.cause = cause


def train_ensemble(
    net: NetworkSpec,
    domain: Domain3D,
    constants: physics.PdeConstants3D,
    obs: ObservationSet,
    cfg: TrainConfig,
    spec: EnsembleSpec = EnsembleSpec(),
    n_interior: int = 2000,
    n_per_piece: int = 200,
    sample_seed: int = 0,
    pole_margin: float = 1e-3,
    callback=None,
) -> FusedPredictor:
    """Train one sub-learner per rotation and return the fused predictor.

    All charts share the same geographic collocation and observation points,
    mapped into each chart; points within ``pole_margin`` of a chart pole are
    dropped from that chart's residual terms.
    """
    if len(obs) == 0:
        raise ContractViolation("observations are empty")
    base = collocation(domain, n_interior, n_per_piece, sample_seed)
    learners = []
    for k, rot in enumerate(rotation_schedule(spec.n_ro)):
        nz = chart_normalizer(domain, rot)
        colloc, targets = rotate_collocation(base, constants, rot, pole_margin)
        prob = Problem3D(
            domain,
            constants,
            colloc,
            rotate_observations(obs, rot),
            normalizer=nz,
            rotation=None if rot.is_identity else rot,
            data_measure=domain.measure(),
            boundary_targets=targets,
        )
        try:
            params, trace = train(net, prob, cfg, callback=None if callback is None else (lambda rec, k=k: callback(k, rec)))
        except Exception as exc:
            raise SubLearnerError(k, rot, exc) from exc
        learners.append(SubLearner(rot, params, nz, trace))
    return FusedPredictor(learners, spec, constants)
