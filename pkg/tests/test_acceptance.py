"""Acceptance checks, one group per criterion.

The terminal summary (see conftest) prints one PASS/FAIL line per criterion.
Criteria 1-3 share a five-seed reconstruction study that takes roughly
half an hour on one CPU core; set ``MDRF_SKIP_STUDY=1`` to skip it during
development.  Study artifacts land in ``acceptance_output/study``.
"""

import csv
import io
import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from mdrf import autodiff as ad
from mdrf import ensemble, network, oracle, physics, sampling, study, training
from mdrf.ensemble import EnsembleSpec, FusedPredictor, SubLearner, fuse, weight
from mdrf.geometry import Domain2D, Domain3D

ROOT = Path(__file__).resolve().parents[1]
ARTIFACTS = ROOT / "acceptance_output"
PI = math.pi
SEEDS = range(5)
TRUE_COEFFS = {"zeta": 0.01, "zeta_tau": 0.02}


def fmt(xs):
    return "[" + ", ".join("absent" if x is None or np.isnan(x) else f"{x:.3g}" for x in xs) + "]"


# --- criteria 1-3: Taylor-Green study -----------------------------------------


@pytest.fixture(scope="module")
def tg_study():
    if os.environ.get("MDRF_SKIP_STUDY") == "1":
        pytest.skip("MDRF_SKIP_STUDY=1")
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    res = study.run_study(SEEDS)
    wall = time.perf_counter() - t0
    res.write(ARTIFACTS / "study")
    return res, wall


def test_criterion_1_reconstruction_accuracy(tg_study, record_property):
    res, wall = tg_study
    ok = wall <= 3600
    for v in study.VARIABLES:
        r = res.rmse_table("full", v)
        good = bool(np.all(np.isfinite(r)) and r.max() <= 2e-2 and np.median(r) <= 1e-2)
        record_property("detail", f"{v} median {np.median(r):.3g} max {r.max():.3g}")
        ok &= good
    record_property("detail", f"study wall time {wall / 60:.1f} min")
    assert ok


def _approach(trace: training.TrainTrace, name: str, truth: float, step1_iters: int) -> str:
    it = trace.series("iter")
    vals = trace.series(name)[it > step1_iters]
    return "below" if np.mean(vals - truth) < 0 else "above"


def test_criterion_2_inverse_parameters(tg_study, record_property):
    res, _ = tg_study
    z, zt = res.coeff_table("zeta"), res.coeff_table("zeta_tau")
    inside = (z >= 0.005) & (z <= 0.015) & (zt >= 0.015) & (zt <= 0.025)
    record_property("detail", f"zeta {fmt(z)} zeta_tau {fmt(zt)}; in range {int(inside.sum())}/5")
    s1 = res.config.step1_iters
    dirs = {k: [_approach(s.trace, k, TRUE_COEFFS[k], s1) for s in res.seeds] for k in TRUE_COEFFS}
    # reported only
    record_property(
        "detail",
        f"approach zeta from below in {dirs['zeta'].count('below')}/5, zeta_tau from above in {dirs['zeta_tau'].count('above')}/5",
    )
    assert inside.sum() >= 4


def test_criterion_3_mechanism_advantage(tg_study, record_property):
    res, _ = tg_study
    ok = True
    for v in ("tau", "v", "w"):
        full, bare, gpr = (res.rmse_table(m, v) for m in study.MODELS)
        good = bool(np.all(full < bare) and np.all(full < gpr))
        record_property("detail", f"{v} full {fmt(full)} no-mech {fmt(bare)} gpr {fmt(gpr)}")
        ok &= good
    p = {m: res.rmse_table(m, "p") for m in study.MODELS}
    present = all(np.all(np.isfinite(p[m])) for m in ("full", "no_mechanism"))
    absent = all(s.report.is_absent("gpr", "p") for s in res.seeds)
    record_property("detail", f"p full {fmt(p['full'])} no-mech {fmt(p['no_mechanism'])} gpr absent={absent}")
    assert ok and present and absent


# --- criterion 4: closed-form residuals -----------------------------------------


def test_criterion_4_residual_vanishes(record_property):
    pts = np.random.default_rng(2024).uniform(0, 1, (10_000, 3))
    jets = oracle.exact_jets(pts)
    r = float(physics.residual_2d(jets, physics.PdeConstants2D(), pts).abs().max())
    div = float((jets["v"].d("x") + jets["w"].d("z")).abs().max())
    hyd = float((jets["p"].d("z") + jets["tau"].val).abs().max())
    record_property("detail", f"max residual {r:.2e}, continuity {div:.2e}, hydrostatic {hyd:.2e}")
    assert r <= 1e-8 and div <= 1e-10 and hyd <= 1e-10


# --- criterion 5: derivatives against finite differences ------------------------


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def test_criterion_5_input_derivatives(record_property):
    spec = network.NetworkSpec.for_mode("2d", 16, 16, {f: 3 for f in ("tau", "v", "w", "p")})
    params = network.init(spec, 3)
    nz = Domain2D().normalizer()
    pts = 0.1 + 0.8 * np.random.default_rng(5).random((40, 3))
    jets = network.field_jets(params, pts, nz, {f: ("x", "z", "t", "xx", "zz") for f in spec.fields})
    h = 1e-4
    worst = 0.0
    for f in spec.fields:
        def fn(q, f=f):
            with torch.no_grad():
                return network.forward_fields(params, torch.as_tensor(nz.normalize(q)), [f])[f].numpy()

        base = fn(pts)
        for k, c in enumerate(("x", "z", "t")):
            e = np.zeros(3)
            e[k] = h
            fd1 = (fn(pts + e) - fn(pts - e)) / (2 * h)
            worst = max(worst, _rel(jets[f].d(c).numpy(), fd1))
            if c != "t":
                fd2 = (fn(pts + e) - 2 * base + fn(pts - e)) / h**2
                worst = max(worst, _rel(jets[f].d(c + c).numpy(), fd2))
    record_property("detail", f"input derivatives max rel {worst:.1e}")
    assert worst < 1e-5


def test_criterion_5_parameter_gradients(record_property):
    spec = network.NetworkSpec.for_mode("2d", 2, 2)
    dom = Domain2D()
    prob = training.Problem2D(dom, physics.PdeConstants2D(), sampling.collocation(dom, 12, 3, 0), oracle.generate_observations(5, 0))
    params = network.init(spec, 0, {"zeta": 0.013, "zeta_tau": 0.017})
    cfg = training.TrainConfig()
    params.requires_grad_(True)
    _, grad = ad.loss_param_gradient(lambda: training.loss(params, prob, cfg, "step2").objective, params.tensors())
    params.requires_grad_(False)
    flat = params.flatten()
    h = 1e-4
    fd = np.empty_like(flat)
    for i in range(len(flat)):
        vals = []
        for sgn in (1, -1):
            p = flat.copy()
            p[i] += sgn * h
            params.load_flat(p)
            with torch.no_grad():
                vals.append(training.loss(params, prob, cfg, "step2").total)
        fd[i] = (vals[0] - vals[1]) / (2 * h)
    params.load_flat(flat)
    # entries far below the gradient scale are compared at that scale
    denom = np.maximum(np.abs(fd), 1e-2 * np.abs(fd).max())
    worst = float(np.max(np.abs(grad - fd) / denom))
    record_property("detail", f"parameter gradients ({len(flat)}) max rel {worst:.1e}")
    assert worst < 1e-4


# --- criterion 6: ensemble invariants -------------------------------------------


SCALES_3D = (1e-4, 1e-4, 1e4, 1e-4, 1e-3, 1e-3)
UNKNOWN_3D = (training.Unknown("beta_tau", 1e-4), training.Unknown("beta_sigma", 1e-4))


def test_criterion_6_weights_and_convexity(record_property):
    assert weight(PI / 2) == 0.5
    g = np.random.default_rng(6)
    worst = 0.0
    for _ in range(10_000):
        m = int(g.integers(2, 5))
        vals = [g.normal(scale=10.0 ** g.uniform(-3, 3), size=1) for _ in range(m)]
        ths = [g.uniform(0, PI, 1) for _ in range(m)]
        lo, hi = np.minimum.reduce(vals), np.maximum.reduce(vals)
        for variant in ensemble.VARIANTS:
            out = fuse([{"u": v} for v in vals], ths, variant)["u"]
            worst = max(worst, float(np.max(lo - out)), float(np.max(out - hi)))
    record_property("detail", "w(pi/2)=0.5 exactly; 1e4 convexity fixtures")
    assert worst <= 0.0


def _query_3d(dom, n, seed):
    g = np.random.default_rng(seed)
    lo = np.array([iv.lo for iv in dom.ranges()])
    hi = np.array([iv.hi for iv in dom.ranges()])
    return lo + (hi - lo) * g.random((n, 4))


def test_criterion_6_single_chart_bitwise(record_property):
    dom = Domain3D()
    rot = ensemble.rotation_schedule(1)[0]
    sl = SubLearner(rot, network.init(network.NetworkSpec.for_mode("3d", 6, 6), 10), ensemble.chart_normalizer(dom, rot))
    pts = _query_3d(dom, 300, 0)
    direct = training.Predictor(sl.params, sl.normalizer, "3d")(pts)
    fused = FusedPredictor([sl], EnsembleSpec(1))(pts)
    record_property("detail", "n_ro=1 fused == sub-learner bitwise")
    assert all(direct[k].tobytes() == fused[k].tobytes() for k in direct)


def test_criterion_6_fused_rmse_on_trained_fixture(record_property):
    torch.set_num_threads(1)
    dom = Domain3D()
    c = physics.PdeConstants3D(residual_scales=SCALES_3D)
    obs = oracle.generate_sphere_observations(dom, 200, 0)
    net = network.NetworkSpec.for_mode("3d", 16, 16)
    cfg = training.TrainConfig(step1_iters=100, step2_iters=100, checkpoint_every=20, unknowns=UNKNOWN_3D)
    fp = ensemble.train_ensemble(net, dom, c, obs, cfg, EnsembleSpec(2), n_interior=300, n_per_piece=50)
    pts = _query_3d(dom, 1000, 5)
    truth = oracle.sphere_fields(pts)
    preds, _ = fp.chart_predictions(pts)
    fused = fp(pts)
    ok = True
    for v in ("tau", "sal", "v_theta", "v_phi"):
        subs = [training.rmse(p[v], truth[v]) for p in preds]
        f = training.rmse(fused[v], truth[v])
        record_property("detail", f"{v} fused {f:.4g} <= max{fmt(subs)}")
        ok &= f <= max(subs)
    assert ok


# --- criteria 7 and 8: CLI runs ---------------------------------------------------


def cli(*args, cwd=None):
    env = {**os.environ, "MDRF_THREADS": "1"}
    r = subprocess.run([sys.executable, "-m", "mdrf.cli", *map(str, args)], capture_output=True, text=True, env=env, cwd=cwd)
    assert r.returncode == 0, r.stderr
    return r


CFG2D = {
    "mode": "2d",
    "network": {"shared_width": 8, "hidden_width": 8},
    "sampling": {"n_interior": 60, "n_per_piece": 10, "seed": 3},
    "training": {"step1_iters": 20, "step2_iters": 20, "checkpoint_every": 5, "seed": 4},
}


def test_criterion_7_determinism(tmp_path, record_property):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    cli("simulate", "--out", a, "--n", "1000", "--seed", "42")
    cli("simulate", "--out", b, "--n", "1000", "--seed", "42")
    same_sim = a.read_bytes() == b.read_bytes()
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(CFG2D))
    outs = [tmp_path / "run1", tmp_path / "run2"]
    for o in outs:
        cli("train", "--config", cfg, "--data", a, "--out", o)
    same_snap = (outs[0] / "snapshot.json").read_bytes() == (outs[1] / "snapshot.json").read_bytes()
    same_trace = (outs[0] / "trace.csv").read_bytes() == (outs[1] / "trace.csv").read_bytes()
    record_property("detail", f"simulate identical={same_sim}, snapshot identical={same_snap}, trace identical={same_trace}")
    assert same_sim and same_snap and same_trace


CFG3D = {
    "mode": "3d",
    "network": {"shared_width": 8, "hidden_width": 8},
    "physics": {
        "constants": {"residual_scales": list(SCALES_3D)},
        "unknown": {"beta_tau": {"init": 1e-4}, "beta_sigma": {"init": 1e-4}},
    },
    "sampling": {"n_interior": 100, "n_per_piece": 20, "seed": 1},
    "training": {"step1_iters": 40, "step2_iters": 20, "checkpoint_every": 5},
    "ensemble": {"n_ro": 2},
}


def test_criterion_8_smoke_3d(tmp_path, record_property):
    cfg = tmp_path / "cfg3d.json"
    cfg.write_text(json.dumps(CFG3D))
    data = tmp_path / "obs3d.csv"
    cli("simulate", "--mode", "3d", "--config", cfg, "--out", data, "--n", "80", "--seed", "2")
    out = tmp_path / "run"
    cli("train", "--config", cfg, "--data", data, "--out", out)
    ok = True
    s1 = CFG3D["training"]["step1_iters"]
    for k in range(CFG3D["ensemble"]["n_ro"]):
        rows = list(csv.DictReader(io.StringIO((out / f"trace_{k}.csv").read_text())))
        losses = np.array([[float(r[c]) for c in ("e_data", "e_pde", "e_icbc", "total")] for r in rows])
        e1 = np.array([float(r["e_data"]) for r in rows if int(r["iter"]) <= s1])
        finite = bool(np.all(np.isfinite(losses)))
        monotone = bool(np.all(np.diff(e1) <= 0))
        record_property("detail", f"chart {k}: finite={finite}, step1 e_data {e1[0]:.4g} -> {e1[-1]:.4g} monotone={monotone}")
        ok &= finite and monotone
    grid = tmp_path / "grid.csv"
    cli("export-grid", "--snapshot", out / "snapshot.json", "--out", grid, "--grid-3d", "2x3x4", "--time", "2000-01-01T12:00:00Z")
    rows = list(csv.DictReader(io.StringIO(grid.read_text())))
    exported = len(rows) == 24 and all(math.isfinite(float(r["tau"])) and math.isfinite(float(r["rho"])) for r in rows)
    record_property("detail", f"export rows {len(rows)} finite={exported}")
    assert ok and exported
