"""Exact Gaussian-process regression, one independent GP per observed variable."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .autodiff import NumericError
from .oracle import ObservationSet

MAX_TRAIN = 2000


class NoDataError(ValueError):
    """A variable was requested that has no observations to regress on."""


@dataclass
class _VarGP:
    x: np.ndarray
    y: np.ndarray
    chol: tuple
    alpha: np.ndarray


@dataclass
class GprModel:
    length_scale: np.ndarray
    noise: float
    signal_var: float = 1.0
    gps: dict[str, _VarGP] = field(default_factory=dict)

    @property
    def variables(self) -> list[str]:
        return list(self.gps)

    def kernel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = a / self.length_scale
        b = b / self.length_scale
        d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
        return self.signal_var * np.exp(-0.5 * np.maximum(d2, 0.0))


def _fit_one(model: GprModel, x: np.ndarray, y: np.ndarray, var: str) -> _VarGP:
    k = model.kernel(x, x)
    k[np.diag_indices_from(k)] += model.noise
    try:
        chol = cho_factor(k, lower=True, check_finite=True)
    except LinAlgError as exc:
        raise NumericError(
            f"kernel matrix for {var!r} is not positive definite ({exc}); increase the noise/jitter"
        ) from None
    return _VarGP(x, y, chol, cho_solve(chol, y))


def gpr_fit(
    obs: ObservationSet,
    variables: Sequence[str] | None = None,
    length_scale: float | Sequence[float] = 0.2,
    noise: float = 1e-6,
    signal_var: float = 1.0,
    max_train: int = MAX_TRAIN,
) -> GprModel:
    """Fit a zero-mean squared-exponential GP per variable.

    ``variables`` defaults to those present in ``obs``; naming one without
    records raises :class:`NoDataError`.
    """
    if noise < 0 or signal_var <= 0:
        raise ValueError("noise must be >= 0 and signal_var > 0")
    dim = obs.points.shape[1]
    ls = np.broadcast_to(np.asarray(length_scale, dtype=float), (dim,)).copy()
    if np.any(ls <= 0):
        raise ValueError("length scales must be positive")
    model = GprModel(ls, float(noise), float(signal_var))
    for var in variables if variables is not None else obs.variables:
        x, y = obs.select(var)
        if len(y) == 0:
            raise NoDataError(f"no observations of {var!r}; a data-only regressor cannot predict it")
        if len(y) > max_train:
            raise ValueError(f"{len(y)} records of {var!r} exceed the exact-solve cap of {max_train}")
        model.gps[var] = _fit_one(model, x, y, var)
    return model


def gpr_predict(model: GprModel, points, variables: Sequence[str] | None = None) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Posterior ``(mean, variance)`` per variable at ``points``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = {}
    for var in variables if variables is not None else model.variables:
        if var not in model.gps:
            raise NoDataError(f"the model has no data for {var!r}")
        gp = model.gps[var]
        ks = model.kernel(pts, gp.x)
        mean = ks @ gp.alpha
        v = cho_solve(gp.chol, ks.T)
        var_ = model.signal_var - np.einsum("ij,ji->i", ks, v)
        out[var] = (mean, np.maximum(var_, 0.0))
    return out


class GprPredictor:
    """Predictor interface over a fitted model; unfitted variables are absent."""

    def __init__(self, model: GprModel):
        self.model = model

    @property
    def fields(self):
        return tuple(self.model.variables)

    def __call__(self, points) -> dict[str, np.ndarray]:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out: dict[str, list] = {v: [] for v in self.model.variables}
        for s in range(0, len(pts), 10000):
            pr = gpr_predict(self.model, pts[s : s + 10000])
            for v, (m, _) in pr.items():
                out[v].append(m)
        return {v: np.concatenate(c) for v, c in out.items()}


def grid_search(
    obs: ObservationSet,
    holdout: ObservationSet,
    length_scales: Sequence[float] = (0.1, 0.2, 0.3),
    noise: float = 1e-6,
) -> float:
    """Length scale with the lowest mean held-out RMSE across variables."""
    best, best_err = None, np.inf
    for ls in length_scales:
        model = gpr_fit(obs, length_scale=ls, noise=noise)
        errs = []
        for var in model.variables:
            x, y = holdout.select(var)
            if len(y):
                m, _ = gpr_predict(model, x, [var])[var]
                errs.append(np.sqrt(np.mean((m - y) ** 2)))
        err = float(np.mean(errs)) if errs else np.inf
        if err < best_err:
            best, best_err = ls, err
    return float(best)
