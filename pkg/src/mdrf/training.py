"""Discrete loss assembly, two-step training and evaluation.

The objective is

    total = E_data^2 + lambda1 * E_pde^2 + lambda2 * E_icbc^2

with each ``E`` the root of a weighted sum of squared residuals over its
point set.  Step 1 optimizes the data term alone with the unknown PDE
coefficients frozen; step 2 optimizes the full objective, coefficients
included.  Both steps share one Adam state so that a step 2 with zero
multipliers continues step 1 exactly.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import physics
from .autodiff import DTYPE, ContractViolation, NumericError
from .geometry import Normalizer, Rotation
from .network import ModelParams, NetworkSpec, field_jets, forward_fields, init
from .oracle import ObservationSet
from .sampling import CollocationSet, PointSet

log = logging.getLogger(__name__)

PHASES = ("step1", "step2")


@dataclass(frozen=True)
class Unknown:
    name: str
    init: float = 0.0
    lower: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    step1_iters: int = 5000
    step2_iters: int = 45000
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lambda1: float = 1.0
    lambda2: float = 1.0
    seed: int = 0
    unknowns: tuple[Unknown, ...] = (Unknown("zeta"), Unknown("zeta_tau"))
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.step1_iters < 0 or self.step2_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda multipliers must be >= 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")

    @property
    def total_iters(self) -> int:
        return self.step1_iters + self.step2_iters


@dataclass
class LossBreakdown:
    e_data: float
    e_pde: float
    e_icbc: float
    lambda1: float
    lambda2: float
    total: float
    phase: str = "step2"
    # differentiable objective; None for diagnostics
    objective: torch.Tensor | None = field(default=None, repr=False)

    def as_row(self) -> dict:
        return {"e_data": self.e_data, "e_pde": self.e_pde, "e_icbc": self.e_icbc, "total": self.total}


@dataclass
class TraceRecord:
    iteration: int
    loss: LossBreakdown
    coeffs: dict[str, float]


@dataclass
class TrainTrace:
    coeff_names: tuple[str, ...]
    records: list[TraceRecord] = field(default_factory=list)

    def append(self, rec: TraceRecord) -> None:
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError("trace iterations must be strictly increasing")
        self.records.append(rec)

    def columns(self) -> list[str]:
        return ["iter", "e_data", "e_pde", "e_icbc", "total", *self.coeff_names]

    def rows(self) -> list[list]:
        return [
            [r.iteration, r.loss.e_data, r.loss.e_pde, r.loss.e_icbc, r.loss.total]
            + [r.coeffs[k] for k in self.coeff_names]
            for r in self.records
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns())
        for row in self.rows():
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()

    def series(self, name: str) -> np.ndarray:
        idx = self.columns().index(name)
        return np.array([row[idx] for row in self.rows()], dtype=float)


class TrainingDiverged(NumericError):
    def __init__(self, message: str, trace: TrainTrace, params: ModelParams):
        super().__init__(message)
        self.trace = trace
        self.params = params


# --- problems -----------------------------------------------------------------


class Problem:
    """Everything the loss needs besides the parameters.

    Subclasses provide the mode-specific residual terms.  ``counters``
    records how often each residual family was evaluated, split into
    objective (differentiable) and diagnostic (no-grad) evaluations.
    """

    mode: str
    coeff_names: tuple[str, ...] = ()

    def __init__(self, normalizer: Normalizer, colloc: CollocationSet, obs: ObservationSet, data_measure: float):
        self.normalizer = normalizer
        self.colloc = colloc
        self.obs = obs
        self.counters: Counter = Counter()
        if len(obs) == 0:
            raise ContractViolation("observations are empty")
        w = obs.weights(data_measure)
        self._data = []
        for var in obs.variables:
            m = obs.var == var
            xn = torch.as_tensor(normalizer.normalize(obs.points[m]))
            self._data.append((var, xn, torch.as_tensor(obs.value[m]), torch.as_tensor(w[m])))

    # model hooks; tests substitute closed-form models here
    def values(self, params: ModelParams, xn: torch.Tensor, fields) -> dict[str, torch.Tensor]:
        """Field values at normalized points."""
        return forward_fields(params, xn, fields)

    def jets(self, params: ModelParams, points: np.ndarray, needed) -> dict:
        """Field jets with physical-coordinate derivatives at physical points."""
        return field_jets(params, points, self.normalizer, needed)

    def data_sq(self, params: ModelParams) -> torch.Tensor:
        total = torch.zeros((), dtype=DTYPE)
        for var, xn, y, w in self._data:
            pred = self.values(params, xn, [var])[var]
            r = pred - y
            if not torch.isfinite(r).all():
                idx = int((~torch.isfinite(r)).nonzero()[0])
                raise NumericError(f"non-finite data residual for {var!r} at record #{idx}")
            total = total + (w * r * r).sum()
        return total

    def coeffs(self, params: ModelParams) -> dict:
        return dict(params.pde)

    def pde_sq(self, params: ModelParams) -> torch.Tensor:
        raise NotImplementedError

    def icbc_sq(self, params: ModelParams) -> torch.Tensor:
        raise NotImplementedError


def _weighted_sq(res: torch.Tensor, w: np.ndarray) -> torch.Tensor:
    return (torch.as_tensor(w, dtype=DTYPE) * (res * res).sum(dim=-1)).sum()


class Problem2D(Problem):
    mode = "2d"

    def __init__(
        self,
        domain,
        constants: physics.PdeConstants2D,
        colloc: CollocationSet,
        obs: ObservationSet,
        data_measure: float | None = None,
        boundary_data: Mapping | None = None,
    ):
        super().__init__(domain.normalizer(), colloc, obs, data_measure or domain.measure())
        self.domain = domain
        self.constants = constants
        self.coeff_names = tuple(constants.unknown)
        self._q = physics.source_q(torch.as_tensor(colloc.interior.points), constants)
        # all 2D pieces are Dirichlet on values, so evaluate them in one pass
        tags = [t for t in physics.BOUNDARY_TAGS if t in colloc.boundary]
        for t in tags:
            physics.check_on_boundary(domain, colloc.boundary[t].points, t)
        self._bpts = np.concatenate([colloc.boundary[t].points for t in tags]) if tags else np.zeros((0, 3))
        self._bw = np.concatenate([colloc.boundary[t].weights for t in tags]) if tags else np.zeros(0)
        self._btargets = physics.boundary_targets_2d(self._bpts, constants, boundary_data)

    def pde_sq(self, params):
        pts = self.colloc.interior.points
        jets = self.jets(params, pts, physics.REQUIRED_2D)
        res = physics.residual_2d(jets, self.constants, pts, q=self._q, coeffs=self.coeffs(params))
        physics.check_residual_finite(res, pts, "pde")
        return _weighted_sq(res, self.colloc.interior.weights)

    def icbc_sq(self, params):
        if len(self._bpts) == 0:
            return torch.zeros((), dtype=DTYPE)
        vals = self.values(params, torch.as_tensor(self.normalizer.normalize(self._bpts)), ("tau", "v", "w", "p"))
        res = torch.stack([vals[f] - torch.as_tensor(self._btargets[f]) for f in ("tau", "v", "w", "p")], dim=-1)
        physics.check_residual_finite(res, self._bpts, "icbc")
        return _weighted_sq(res, self._bw)


class Problem3D(Problem):
    """Spherical problem, optionally expressed in a rotated chart.

    ``colloc`` and ``obs`` must already be in chart coordinates and
    ``normalizer`` built for the chart.
    """

    mode = "3d"

    def __init__(
        self,
        domain,
        constants: physics.PdeConstants3D,
        colloc: CollocationSet,
        obs: ObservationSet,
        normalizer: Normalizer | None = None,
        rotation: Rotation | None = None,
        data_measure: float | None = None,
        boundary_targets: Mapping[str, Mapping[str, np.ndarray]] | None = None,
    ):
        super().__init__(normalizer or domain.normalizer(), colloc, obs, data_measure or domain.measure())
        self.domain = domain
        self.constants = constants
        self.rotation = rotation
        self.coeff_names = tuple(constants.unknown)
        self._targets = dict(boundary_targets or {})
        for tag, ps in colloc.boundary.items():
            if tag not in self._targets:
                self._targets[tag] = physics.boundary_targets_3d(ps.points, constants, tag)

    def pde_sq(self, params):
        pts = self.colloc.interior.points
        jets = self.jets(params, pts, physics.REQUIRED_3D)
        res = physics.residual_3d(jets, self.constants, pts, coeffs=self.coeffs(params), rotation=self.rotation)
        physics.check_residual_finite(res, pts, "pde")
        return _weighted_sq(res, self.colloc.interior.weights)

    def icbc_sq(self, params):
        total = torch.zeros((), dtype=DTYPE)
        for tag, ps in self.colloc.boundary.items():
            need = physics.icbc_required("3d", tag, self.constants.lateral_mode)
            jets = self.jets(params, ps.points, need)
            # chart coordinates need not match the geographic boundary tags
            res = physics.icbc_residual_3d(
                jets, self.constants, ps.points, tag, self.domain, normals=ps.normals, targets=self._targets[tag], check=False
            )
            physics.check_residual_finite(res, ps.points, f"icbc/{tag}")
            total = total + _weighted_sq(res, ps.weights)
        return total


# --- loss ---------------------------------------------------------------------


def loss(
    params: ModelParams,
    problem: Problem,
    cfg: TrainConfig,
    phase: str = "step2",
    with_physics: bool = True,
) -> LossBreakdown:
    """Evaluate the objective for ``phase``.

    Under ``step1`` only the data term enters ``total`` and the objective;
    the physics terms are still reported (computed without gradients)
    unless ``with_physics`` is false, in which case they read ``nan``.
    """
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}")
    grad = torch.is_grad_enabled()
    data_sq = problem.data_sq(params)
    if phase == "step2":
        kind = "objective" if grad else "diagnostic"
        problem.counters[f"pde_{kind}"] += 1
        problem.counters[f"icbc_{kind}"] += 1
        pde_sq = problem.pde_sq(params)
        icbc_sq = problem.icbc_sq(params)
        objective = data_sq + cfg.lambda1 * pde_sq + cfg.lambda2 * icbc_sq
    else:
        objective = data_sq
        if with_physics:
            problem.counters["pde_diagnostic"] += 1
            problem.counters["icbc_diagnostic"] += 1
            with torch.no_grad():
                pde_sq = problem.pde_sq(params)
                icbc_sq = problem.icbc_sq(params)
        else:
            pde_sq = icbc_sq = torch.tensor(float("nan"), dtype=DTYPE)
    total = float(objective.detach())
    data_sq, pde_sq, icbc_sq = (float(v.detach()) for v in (data_sq, pde_sq, icbc_sq))
    if not math.isfinite(total):
        raise NumericError(f"non-finite {phase} objective: {total}")
    return LossBreakdown(
        e_data=math.sqrt(data_sq),
        e_pde=math.sqrt(pde_sq) if math.isfinite(pde_sq) else float("nan"),
        e_icbc=math.sqrt(icbc_sq) if math.isfinite(icbc_sq) else float("nan"),
        lambda1=cfg.lambda1,
        lambda2=cfg.lambda2,
        total=total,
        phase=phase,
        objective=objective if grad else None,
    )


def make_params(spec: NetworkSpec, cfg: TrainConfig) -> ModelParams:
    return init(spec, cfg.seed, {u.name: u.init for u in cfg.unknowns})


def _project(params: ModelParams, cfg: TrainConfig) -> None:
    with torch.no_grad():
        for u in cfg.unknowns:
            if u.name in params.pde:
                params.pde[u.name].clamp_(min=u.lower)


def train(
    spec: NetworkSpec,
    problem: Problem,
    cfg: TrainConfig,
    params: ModelParams | None = None,
    callback: Callable[[TraceRecord], None] | None = None,
) -> tuple[ModelParams, TrainTrace]:
    """Run step 1 (data only) then step 2 (full objective) with Adam.

    Returns the final parameters and the checkpoint trace.  A non-finite
    objective aborts with :class:`TrainingDiverged` carrying the trace so far.
    """
    params = make_params(spec, cfg) if params is None else params
    missing = set(problem.coeff_names) - set(params.pde)
    if missing:
        raise ContractViolation(f"parameters lack unknown coefficients {sorted(missing)}")
    params.requires_grad_(True)
    weights = params.weight_tensors()
    coeff_t = params.pde_tensors()
    opt = torch.optim.Adam(
        [{"params": weights}, {"params": coeff_t}],
        lr=cfg.learning_rate,
        betas=cfg.betas,
        eps=cfg.eps,
    )
    trace = TrainTrace(tuple(params.pde.keys()))
    last = cfg.total_iters
    # zero multipliers: the physics terms contribute nothing to the gradient
    physics_free = cfg.lambda1 == 0 and cfg.lambda2 == 0

    def checkpoint(it: int, phase: str) -> None:
        with torch.no_grad():
            lb = loss(params, problem, cfg, phase)
        rec = TraceRecord(it, lb, params.pde_values())
        trace.append(rec)
        if callback is not None:
            callback(rec)
        log.debug("iter %d %s e_data=%.3e e_pde=%.3e e_icbc=%.3e %s", it, phase, lb.e_data, lb.e_pde, lb.e_icbc, rec.coeffs)

    def diverged(it, exc):
        return TrainingDiverged(f"training diverged at iteration {it}: {exc}", trace, params)

    try:
        checkpoint(0, "step1" if cfg.step1_iters > 0 else "step2")
    except NumericError as exc:
        raise diverged(0, exc) from exc

    for it in range(1, last + 1):
        phase = "step1" if it <= cfg.step1_iters else "step2"
        opt.zero_grad(set_to_none=True)
        try:
            if phase == "step1" or physics_free:
                problem.counters["data_objective"] += 1
                obj = problem.data_sq(params)
                if not torch.isfinite(obj):
                    raise NumericError(f"non-finite data objective {float(obj.detach())}")
            else:
                obj = loss(params, problem, cfg, "step2").objective
        except NumericError as exc:
            raise diverged(it, exc) from exc
        obj.backward()
        if phase == "step1" or physics_free:
            # coefficients stay frozen during step 1
            for t in coeff_t:
                t.grad = None
        opt.step()
        _project(params, cfg)
        if it % cfg.checkpoint_every == 0 or it == last or it == cfg.step1_iters:
            try:
                checkpoint(it, phase)
            except NumericError as exc:
                raise diverged(it, exc) from exc
    params.requires_grad_(False)
    return params, trace


# --- evaluation -----------------------------------------------------------------


@dataclass
class EvalReport:
    rmse: dict[str, float]
    n_points: int
    profiles: dict[str, dict[str, list]] = field(default_factory=dict)


def rmse(pred, truth) -> float:
    d = np.asarray(pred, dtype=float) - np.asarray(truth, dtype=float)
    return float(np.sqrt(np.mean(d * d)))


def binned_rmse(coord: np.ndarray, err_sq: np.ndarray, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """RMSE per bin of ``coord``; empty bins give ``nan``. Returns (rmse, count)."""
    idx = np.clip(np.digitize(coord, edges) - 1, 0, len(edges) - 2)
    sums = np.bincount(idx, weights=err_sq, minlength=len(edges) - 1)
    counts = np.bincount(idx, minlength=len(edges) - 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.sqrt(sums / counts)
    return np.where(counts > 0, out, np.nan), counts


def evaluate(
    predict: Callable[[np.ndarray], Mapping[str, np.ndarray]],
    points,
    truth: Mapping[str, np.ndarray],
    region: Callable[[np.ndarray], np.ndarray] | None = None,
    coords: Sequence[str] | None = None,
    bins: Mapping[str, np.ndarray] | None = None,
) -> EvalReport:
    """Per-variable RMSE of ``predict`` against labelled ``truth`` at ``points``.

    ``region`` is a boolean mask function selecting the subdomain (whole set
    by default).  ``bins`` maps coordinate names to bin edges for RMSE
    profiles; ``coords`` names the point columns for that lookup.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    mask = np.ones(len(pts), dtype=bool) if region is None else np.asarray(region(pts), dtype=bool)
    if not mask.any():
        raise ValueError("evaluation region contains no points")
    sel = pts[mask]
    pred = predict(sel)
    report = EvalReport({}, int(mask.sum()))
    for var, tv in truth.items():
        if var not in pred or pred[var] is None:
            continue
        tv = np.asarray(tv, dtype=float)[mask]
        report.rmse[var] = rmse(pred[var], tv)
        if bins:
            if coords is None:
                raise ValueError("coords are needed to bin by coordinate")
            err_sq = (np.asarray(pred[var]) - tv) ** 2
            for c, edges in bins.items():
                r, n = binned_rmse(sel[:, list(coords).index(c)], err_sq, np.asarray(edges, dtype=float))
                report.profiles.setdefault(c, {"edges": list(map(float, edges))})[var] = r.tolist()
                report.profiles[c]["count"] = n.tolist()
    return report


class Predictor:
    """Callable wrapper: physical points -> dict of numpy field arrays."""

    def __init__(self, params: ModelParams, normalizer: Normalizer, mode: str, constants=None, check: bool = True):
        self.params = params
        self.normalizer = normalizer
        self.mode = mode
        self.constants = constants
        self.check = check

    @property
    def fields(self) -> tuple[str, ...]:
        return self.params.spec.fields

    def __call__(self, points, check: bool | None = None) -> dict[str, np.ndarray]:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        check = self.check if check is None else check
        out = {}
        with torch.no_grad():
            for start in range(0, len(pts), 20000):
                chunk = torch.as_tensor(self.normalizer.normalize(pts[start : start + 20000], check=check))
                vals = forward_fields(self.params, chunk)
                for k, v in vals.items():
                    out.setdefault(k, []).append(v.numpy())
        res = {k: np.concatenate(v) if v else np.zeros(0) for k, v in out.items()}
        if not res:
            res = {k: np.zeros(0) for k in self.fields}
        return res
