import numpy as np
import pytest

from mdrf import baseline
from mdrf.autodiff import NumericError
from mdrf.baseline import NoDataError, gpr_fit, gpr_predict
from mdrf.oracle import ObservationSet, generate_observations


def obs1d(x, y, var="tau"):
    x = np.asarray(x, dtype=float).reshape(-1, 1)
    return ObservationSet(("x",), x, [var] * len(x), np.asarray(y, dtype=float))


def test_single_point_interpolates():
    m = gpr_fit(obs1d([0.3], [1.7]), noise=0.0)
    mean, var = gpr_predict(m, [[0.3]])["tau"]
    assert mean[0] == pytest.approx(1.7, abs=1e-14)
    assert var[0] == pytest.approx(0.0, abs=1e-14)


def test_far_point_reverts_to_prior():
    m = gpr_fit(obs1d([0.0, 0.1], [2.0, -1.0]), length_scale=0.2)
    mean, var = gpr_predict(m, [[50.0]])["tau"]
    assert mean[0] == 0.0 and var[0] == pytest.approx(1.0)


def test_symmetric_midpoint():
    m = gpr_fit(obs1d([0.2, 0.6], [1.0, 3.0]), length_scale=0.3)
    # zero prior mean shrinks toward 0, symmetric weights give the average scaled equally
    mean, _ = gpr_predict(m, [[0.4]])["tau"]
    k = np.exp(-0.5 * (0.2 / 0.3) ** 2)
    kk = np.exp(-0.5 * (0.4 / 0.3) ** 2)
    w = k / (1 + 1e-6 + kk)
    assert mean[0] == pytest.approx(w * (1.0 + 3.0), rel=1e-10)
    # equal targets: the mean is the same fraction of that target at the midpoint
    m2 = gpr_fit(obs1d([0.2, 0.6], [2.0, 2.0]), length_scale=0.3)
    assert gpr_predict(m2, [[0.4]])["tau"][0][0] == pytest.approx(mean[0], rel=1e-10)


def test_dense_solve_oracle():
    x = np.array([0.0, 0.17, 0.4, 0.55, 0.9])
    y = np.array([0.3, -1.2, 0.8, 0.1, 2.0])
    q = np.linspace(-0.2, 1.1, 17)
    ls, noise, sv = 0.25, 1e-4, 1.3
    m = gpr_fit(obs1d(x, y), length_scale=ls, noise=noise, signal_var=sv)
    mean, var = gpr_predict(m, q[:, None])["tau"]
    k = lambda a, b: sv * np.exp(-0.5 * ((a[:, None] - b[None, :]) / ls) ** 2)
    K = k(x, x) + noise * np.eye(5)
    ks = k(q, x)
    want_mean = ks @ np.linalg.solve(K, y)
    want_var = sv - np.sum(ks * np.linalg.solve(K, ks.T).T, axis=1)
    assert np.max(np.abs(mean - want_mean)) <= 1e-10
    assert np.max(np.abs(var - want_var)) <= 1e-10


def test_variance_nonnegative(rng):
    obs = generate_observations(300, 0)
    m = gpr_fit(obs, noise=1e-10)
    q = np.concatenate([rng.uniform(0, 1, (500, 3)), obs.points[:50]])
    for mean, var in gpr_predict(m, q).values():
        assert np.all(var >= 0) and np.all(np.isfinite(mean))


def test_duplicate_point_leaves_predictions(rng):
    x = rng.uniform(0, 1, (40, 3))
    y = np.sin(3 * x).sum(1)
    a = ObservationSet(("x", "z", "t"), x, ["tau"] * 40, y)
    b = ObservationSet(("x", "z", "t"), np.vstack([x, x[:1]]), ["tau"] * 41, np.append(y, y[0]))
    q = rng.uniform(0, 1, (200, 3))
    # a duplicate halves the effective noise at that point, so the shift is O(noise)
    pa = gpr_predict(gpr_fit(a, noise=1e-9), q)["tau"][0]
    pb = gpr_predict(gpr_fit(b, noise=1e-9), q)["tau"][0]
    assert np.max(np.abs(pa - pb)) <= 1e-8


def test_pressure_without_data():
    obs = generate_observations(50, 0)
    with pytest.raises(NoDataError):
        gpr_fit(obs, variables=("tau", "p"))
    m = gpr_fit(obs)
    with pytest.raises(NoDataError):
        gpr_predict(m, [[0.5, 0.5, 0.5]], ["p"])
    out = baseline.GprPredictor(m)(np.full((3, 3), 0.5))
    assert "p" not in out and set(out) == {"tau", "v", "w"}


def test_indefinite_kernel_suggests_jitter():
    x = np.zeros((3, 1))
    with pytest.raises(NumericError, match="jitter"):
        gpr_fit(obs1d(x[:, 0], [1.0, 2.0, 3.0]), noise=0.0)


def test_argument_validation():
    with pytest.raises(ValueError):
        gpr_fit(obs1d([0.0], [1.0]), noise=-1.0)
    with pytest.raises(ValueError):
        gpr_fit(obs1d([0.0], [1.0]), length_scale=0.0)
    with pytest.raises(ValueError):
        gpr_fit(generate_observations(30, 0), max_train=10)


def test_grid_search_picks_candidate():
    tr, ho = generate_observations(200, 0), generate_observations(100, 1)
    best = baseline.grid_search(tr, ho, (0.05, 0.2, 5.0))
    assert best == 0.2
