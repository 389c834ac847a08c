"""Cross-model comparison: region RMSE, RMSE-over-time curves, binned profiles."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .sampling import _cell_centers, sample_interior

Predict = Callable[[np.ndarray], Mapping[str, np.ndarray]]
Truth = Callable[[np.ndarray], Mapping[str, np.ndarray]]


@dataclass(frozen=True)
class Region:
    name: str
    contains: Callable[[np.ndarray], np.ndarray]
    description: str = ""


def whole_region(domain) -> Region:
    return Region("whole", lambda p: np.ones(len(p), dtype=bool), "entire space-time domain")


def rmse_with_se(err: np.ndarray) -> tuple[float, float]:
    """RMSE and its Monte Carlo standard error (delta method on the mean square)."""
    sq = err * err
    mse = float(sq.mean())
    r = math.sqrt(mse)
    se_mse = float(sq.std(ddof=1)) / math.sqrt(len(sq)) if len(sq) > 1 else float("nan")
    se = se_mse / (2 * r) if r > 0 else 0.0
    return r, se


@dataclass
class ComparisonReport:
    variables: tuple[str, ...]
    regions: dict[str, str]
    n_points: int
    seed: int
    # rows of (model, region, var, rmse|None, se|None, n)
    region_rmse: list[tuple] = field(default_factory=list)
    # rows of (model, region, var, t, rmse|None)
    time_curves: list[tuple] = field(default_factory=list)
    # rows of (model, var, coord, lo, hi, rmse|None, count)
    profiles: list[tuple] = field(default_factory=list)

    def rmse(self, model: str, var: str, region: str = "whole"):
        for m, r, v, val, _, _ in self.region_rmse:
            if (m, r, v) == (model, region, var):
                return val
        raise KeyError((model, region, var))

    def is_absent(self, model: str, var: str) -> bool:
        return self.rmse(model, var) is None

    def to_dict(self) -> dict:
        return {
            "header": {
                "variables": list(self.variables),
                "regions": self.regions,
                "n_points": self.n_points,
                "seed": self.seed,
                "absent": "null rmse marks a variable the model cannot predict",
            },
            "region_rmse": [dict(zip(("model", "region", "var", "rmse", "se", "n"), r)) for r in self.region_rmse],
            "time_curves": [dict(zip(("model", "region", "var", "t", "rmse"), r)) for r in self.time_curves],
            "profiles": [dict(zip(("model", "var", "coord", "lo", "hi", "rmse", "count"), r)) for r in self.profiles],
        }

    def tables(self) -> dict[str, str]:
        return {
            "region_rmse.csv": _csv(("model", "region", "var", "rmse", "se", "n", "status"), [(*r, "absent" if r[3] is None else "ok") for r in self.region_rmse]),
            "time_curves.csv": _csv(("model", "region", "var", "t", "rmse"), self.time_curves),
            "profiles.csv": _csv(("model", "var", "coord", "lo", "hi", "rmse", "count"), self.profiles),
        }

    def write(self, path) -> list[Path]:
        """Write ``<path>`` as JSON and the flat tables next to it."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")
        written = [path]
        for name, text in self.tables().items():
            p = path.with_name(f"{path.stem}_{name}")
            p.write_text(text, encoding="utf-8")
            written.append(p)
        return written


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _predict_all(models: Mapping[str, Predict], pts: np.ndarray) -> dict[str, Mapping[str, np.ndarray]]:
    return {name: m(pts) for name, m in models.items()}


def _row_rmse(pred: Mapping, truth: Mapping, var: str, mask: np.ndarray):
    if var not in pred or pred[var] is None:
        return None, None
    err = np.asarray(pred[var], dtype=float)[mask] - np.asarray(truth[var], dtype=float)[mask]
    return rmse_with_se(err)


def space_grid(domain, t: float, shape: Sequence[int]) -> np.ndarray:
    """Cell-centred lattice over the spatial coordinates at time ``t``."""
    spatial = [c for c in domain.coords if c != "t"]
    axes = [_cell_centers(domain.range_of(c).lo, domain.range_of(c).hi, k) for c, k in zip(spatial, shape)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(spatial))
    cols = []
    for c in domain.coords:
        cols.append(np.full(len(mesh), t) if c == "t" else mesh[:, spatial.index(c)])
    return np.column_stack(cols)


def compare(
    models: Mapping[str, Predict],
    truth: Truth,
    domain,
    variables: Sequence[str],
    regions: Sequence[Region] = (),
    n_points: int = 100_000,
    seed: int = 0,
    n_times: int = 11,
    space_shape: Sequence[int] | None = None,
    bins: int = 10,
) -> ComparisonReport:
    """Evaluate every model against ``truth`` on a shared point sample.

    ``regions`` are added to the implicit ``whole`` region.  A model whose
    output lacks a variable gets ``None`` (absent) rather than a number.
    """
    regs = [whole_region(domain), *regions]
    names = [r.name for r in regs]
    if len(set(names)) != len(names):
        raise ValueError("region names must be unique")
    spatial_dim = domain.dim - 1
    space_shape = tuple(space_shape or ((64,) * spatial_dim if spatial_dim <= 2 else (16,) * spatial_dim))
    rep = ComparisonReport(tuple(variables), {r.name: r.description for r in regs}, n_points, seed)

    pts = sample_interior(domain, n_points, seed).points
    tv = truth(pts)
    preds = _predict_all(models, pts)
    masks = {r.name: np.asarray(r.contains(pts), dtype=bool) for r in regs}
    for mname, pred in preds.items():
        for r in regs:
            mask = masks[r.name]
            for var in variables:
                if not mask.any():
                    rep.region_rmse.append((mname, r.name, var, None, None, 0))
                    continue
                val, se = _row_rmse(pred, tv, var, mask)
                rep.region_rmse.append((mname, r.name, var, val, se, int(mask.sum())))

    # binned profiles over each coordinate, whole region
    for k, c in enumerate(domain.coords):
        iv = domain.range_of(c)
        edges = np.linspace(iv.lo, iv.hi, bins + 1)
        idx = np.clip(np.digitize(pts[:, k], edges) - 1, 0, bins - 1)
        for mname, pred in preds.items():
            for var in variables:
                absent = var not in pred or pred[var] is None
                for b in range(bins):
                    m = idx == b
                    val = None if absent or not m.any() else _row_rmse(pred, tv, var, m)[0]
                    rep.profiles.append((mname, var, c, float(edges[b]), float(edges[b + 1]), val, int(m.sum())))

    t_iv = domain.range_of("t")
    for t in np.linspace(t_iv.lo, t_iv.hi, n_times):
        g = space_grid(domain, float(t), space_shape)
        gt = truth(g)
        gp = _predict_all(models, g)
        gmasks = {r.name: np.asarray(r.contains(g), dtype=bool) for r in regs}
        for mname, pred in gp.items():
            for r in regs:
                for var in variables:
                    m = gmasks[r.name]
                    val = _row_rmse(pred, gt, var, m)[0] if m.any() else None
                    rep.time_curves.append((mname, r.name, var, float(t), val))
    return rep
