"""Taylor-Green reconstruction study: full model, no-mechanism variant and GPR.

Observations of ``tau, v, w`` are drawn inside two rounded rectangles; the
pressure is never observed and ``zeta, zeta_tau`` start from zero.  Each
seed trains the full model and the ``lambda1 = lambda2 = 0`` variant on the
same data and collocation points and fits a GPR baseline, then compares all
three against the closed form.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import baseline, oracle, report
from .geometry import Domain2D
from .network import NetworkSpec
from .physics import PdeConstants2D
from .sampling import collocation
from .training import Predictor, Problem2D, TrainConfig, TrainTrace, train

log = logging.getLogger(__name__)

DEFAULT_RECTS = (
    oracle.RoundedRect(0.3, 0.3, 0.15, 0.15, 0.05),
    oracle.RoundedRect(0.7, 0.7, 0.15, 0.15, 0.05),
)
MODELS = ("full", "no_mechanism", "gpr")
VARIABLES = ("tau", "v", "w", "p")


@dataclass(frozen=True)
class StudyConfig:
    n_obs: int = 1000
    width: int = 64
    n_interior: int = 1000
    n_per_piece: int = 200
    step1_iters: int = 1000
    step2_iters: int = 5000
    learning_rate: float = 1e-3
    checkpoint_every: int = 250
    rects: tuple[oracle.RoundedRect, ...] = DEFAULT_RECTS
    gpr_length_scale: float = 0.2
    gpr_noise: float = 1e-6
    eval_points: int = 100_000
    n_times: int = 11


@dataclass
class SeedResult:
    seed: int
    report: report.ComparisonReport
    coeffs: dict[str, float]
    trace: TrainTrace
    seconds: float

    def rmse(self, model: str, var: str, region: str = "whole"):
        return self.report.rmse(model, var, region)


@dataclass
class StudyResult:
    config: StudyConfig
    seeds: list[SeedResult] = field(default_factory=list)

    def rmse_table(self, model: str, var: str, region: str = "whole") -> np.ndarray:
        vals = [s.rmse(model, var, region) for s in self.seeds]
        return np.array([np.nan if v is None else v for v in vals])

    def coeff_table(self, name: str) -> np.ndarray:
        return np.array([s.coeffs[name] for s in self.seeds])

    @property
    def seconds(self) -> float:
        return sum(s.seconds for s in self.seeds)

    def summary(self) -> dict:
        return {
            "seeds": [s.seed for s in self.seeds],
            "seconds": [s.seconds for s in self.seeds],
            "coeffs": {k: self.coeff_table(k).tolist() for k in ("zeta", "zeta_tau")},
            "rmse": {
                m: {v: [None if np.isnan(x) else float(x) for x in self.rmse_table(m, v)] for v in VARIABLES}
                for m in MODELS
            },
        }

    def write(self, out_dir) -> None:
        """Per-seed comparison reports and traces, plus ``summary.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for s in self.seeds:
            s.report.write(out / f"seed{s.seed}_report.json")
            (out / f"seed{s.seed}_trace.csv").write_text(s.trace.to_csv(), encoding="utf-8")
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=1) + "\n", encoding="utf-8")


def run_seed(seed: int, cfg: StudyConfig = StudyConfig()) -> SeedResult:
    t0 = time.perf_counter()
    dom, consts = Domain2D(), PdeConstants2D()
    region = oracle.DataRegion(dom, cfg.rects)
    obs = oracle.generate_observations(cfg.n_obs, seed, region=region, params=consts.taylor_green())
    colloc = collocation(dom, cfg.n_interior, cfg.n_per_piece, seed + 100)
    net = NetworkSpec.for_mode("2d", cfg.width, cfg.width)
    tcfg = TrainConfig(
        step1_iters=cfg.step1_iters,
        step2_iters=cfg.step2_iters,
        learning_rate=cfg.learning_rate,
        seed=seed,
        checkpoint_every=cfg.checkpoint_every,
    )
    full, trace = train(net, Problem2D(dom, consts, colloc, obs, region.measure()), tcfg)
    bare, _ = train(net, Problem2D(dom, consts, colloc, obs, region.measure()), replace(tcfg, lambda1=0.0, lambda2=0.0))
    gpr = baseline.GprPredictor(baseline.gpr_fit(obs, length_scale=cfg.gpr_length_scale, noise=cfg.gpr_noise))
    nz = dom.normalizer()
    models = {"full": Predictor(full, nz, "2d"), "no_mechanism": Predictor(bare, nz, "2d"), "gpr": gpr}
    rep = report.compare(
        models,
        lambda p: oracle.exact(p, consts.taylor_green()),
        dom,
        VARIABLES,
        [report.Region("data", region.contains, "union of the observation rectangles")],
        n_points=cfg.eval_points,
        seed=10_000 + seed,
        n_times=cfg.n_times,
    )
    secs = time.perf_counter() - t0
    log.info("seed %d done in %.0fs: coeffs %s", seed, secs, full.pde_values())
    return SeedResult(seed, rep, full.pde_values(), trace, secs)


def run_study(seeds: Sequence[int] = range(5), cfg: StudyConfig = StudyConfig()) -> StudyResult:
    out = StudyResult(cfg)
    for s in seeds:
        out.seeds.append(run_seed(int(s), cfg))
    return out
