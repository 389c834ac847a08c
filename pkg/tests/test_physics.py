import math

import numpy as np
import pytest
import torch

from mdrf import physics
from mdrf.autodiff import ContractViolation, Jet
from mdrf.geometry import Domain2D, Domain3D, Rotation
from mdrf.oracle import exact_jets
from mdrf.physics import PdeConstants2D, PdeConstants3D, residual_2d, residual_3d, source_q

PI = math.pi
C2 = PdeConstants2D()


def T(a):
    return torch.as_tensor(np.asarray(a, dtype=float))


def jet(val, first=None, second=None, coords=("x", "z", "t"), second_of=("x", "z")):
    """Jet from explicit channels; missing channels are zero arrays."""
    n = np.shape(val)
    first = first or {}
    second = second or {}
    d1 = {c: T(first.get(c, np.zeros(n))) for c in coords}
    d2 = {c: T(second.get(c, np.zeros(n))) for c in second_of}
    return Jet(T(val), d1, d2)


def tg_hand_jets(pts, eta=0.01, zeta=0.01, zeta_tau=0.02):
    """Closed-form fields with derivatives written out by hand."""
    x, z, t = pts[:, 0], pts[:, 1], pts[:, 2]
    k = 2 * PI
    a = -4 * PI**2 * (eta + zeta)
    b = -4 * PI**2 * zeta_tau
    ev, et, ep = np.exp(a * t), np.exp(b * t), np.exp(2 * a * t)
    sx, cx, sz, cz = np.sin(k * x), np.cos(k * x), np.sin(k * z), np.cos(k * z)
    tau = jet(sz * et, {"z": k * cz * et, "t": b * sz * et}, {"z": -k * k * sz * et})
    v = jet(
        -sx * cz * ev,
        {"x": -k * cx * cz * ev, "z": k * sx * sz * ev, "t": -a * sx * cz * ev},
        {"x": k * k * sx * cz * ev, "z": k * k * sx * cz * ev},
    )
    w = jet(
        cx * sz * ev,
        {"x": -k * sx * sz * ev, "z": k * cx * cz * ev, "t": a * cx * sz * ev},
        {"x": -k * k * cx * sz * ev, "z": -k * k * cx * sz * ev},
    )
    p = jet(
        0.25 * np.cos(2 * k * x) * ep + cz * et / k,
        {"x": -PI * np.sin(2 * k * x) * ep, "z": -sz * et},
    )
    return {"tau": tau, "v": v, "w": w, "p": p}


@pytest.fixture(scope="module")
def pts10k():
    return np.random.default_rng(2024).uniform(0, 1, (10_000, 3))


def test_taylor_green_residual_vanishes_hand_derivatives(pts10k):
    r = residual_2d(tg_hand_jets(pts10k), C2, pts10k)
    assert r.shape == (10_000, 4)
    assert float(r.abs().max()) <= 1e-8


def test_taylor_green_residual_vanishes_jet_engine(pts10k):
    r = residual_2d(exact_jets(pts10k), C2, pts10k)
    assert float(r.abs().max()) <= 1e-8


def test_taylor_green_example_point():
    pt = np.array([[0.13, 0.42, 0.3]])
    assert float(residual_2d(exact_jets(pt), C2, pt).abs().max()) <= 1e-8


def test_continuity_and_hydrostatic_identities(pts10k):
    j = tg_hand_jets(pts10k)
    div = j["v"].d("x") + j["w"].d("z")
    hyd = j["p"].d("z") + j["tau"].val
    assert float(div.abs().max()) <= 1e-10
    assert float(hyd.abs().max()) <= 1e-10


def _zero_jets(n):
    return {f: jet(np.zeros(n)) for f in ("tau", "v", "w", "p")}


def test_zero_fields_where_source_vanishes():
    pt = np.array([[0.25, 0.37, 0.6]])
    # cos(pi/2) is 6e-17 in floating point
    assert residual_2d(_zero_jets(1), C2, pt)[0].tolist() == pytest.approx([0.0, 0.0, 0.0, 0.0], abs=1e-15)


def test_zero_fields_temperature_residual_is_minus_q():
    pt = np.array([[0.0, 0.125, 0.0]])
    r = residual_2d(_zero_jets(1), C2, pt)[0]
    assert r[:3].tolist() == [0.0, 0.0, 0.0]
    assert float(r[3]) == pytest.approx(-PI, abs=1e-12)


def test_source_q_examples():
    assert source_q(np.array([0.0, 0.125, 0.0])) == pytest.approx(PI, abs=1e-14)
    z = np.linspace(0, 1, 11)
    t = np.linspace(0, 1, 11)
    pts = np.column_stack([np.full(11, 0.25), z, t])
    assert np.max(np.abs(source_q(pts))) < 1e-15
    # independent scalar: pi * exp(-4 pi^2 * 0.04)
    assert source_q(np.array([0.0, 0.125, 1.0])) == pytest.approx(0.6476490, abs=1e-6)


def test_source_q_accepts_tensors():
    pts = torch.tensor([[0.0, 0.125, 0.0]], dtype=torch.float64)
    assert float(source_q(pts)[0]) == pytest.approx(PI)


def test_residual_affine_in_unknown_coefficients(rng):
    pts = rng.uniform(0, 1, (50, 3))
    j = {f: jet(rng.normal(size=50), {c: rng.normal(size=50) for c in "xzt"}, {c: rng.normal(size=50) for c in "xz"}) for f in ("tau", "v", "w", "p")}
    vals = [0.0, 0.7, 2.3]
    r = [residual_2d(j, C2, pts, coeffs={"zeta": s, "zeta_tau": -2 * s}) for s in vals]
    # affine: r(s) = r(0) + s * slope
    slope = (r[1] - r[0]) / vals[1]
    pred = r[0] + vals[2] * slope
    assert float((pred - r[2]).abs().max()) <= 1e-12 * max(1.0, float(r[2].abs().max()))


def test_missing_derivative_is_contract_violation():
    pts = np.array([[0.1, 0.2, 0.3]])
    j = _zero_jets(1)
    j["v"] = Jet(T([0.0]), {"x": T([0.0]), "z": T([0.0])})
    with pytest.raises(ContractViolation):
        residual_2d(j, C2, pts)
    del j["v"]
    with pytest.raises(ContractViolation):
        residual_2d(j, C2, pts)


# --- spherical system ---------------------------------------------------------

C3 = PdeConstants3D(residual_scales=(1, 1, 1, 1, 1, 1))
S3 = ("r", "theta", "phi", "t")
S3_2 = ("r", "theta", "phi")
F3 = ("tau", "sal", "w", "v_theta", "v_phi", "p")


def jets3(vals, first=None, second=None, n=1):
    first = first or {}
    second = second or {}
    out = {}
    for f in F3:
        out[f] = jet(np.full(n, vals.get(f, 0.0)), first.get(f, {}), second.get(f, {}), S3, S3_2)
    return out


def rest_state(n):
    return jets3({"tau": C3.tau0, "sal": C3.sigma0, "p": 0.0}, {"p": {"r": np.full(n, -C3.rho0 * C3.g)}}, n=n)


def test_rest_state_residual_zero(rng):
    n = 200
    th = rng.uniform(0.01, PI - 0.01, n)
    pts = np.column_stack([np.full(n, C3.r_e - 500), th, rng.uniform(0, 2 * PI, n), rng.uniform(0, 1, n)])
    r = residual_3d(rest_state(n), C3, pts)
    assert float(r.abs().max()) <= 1e-8
    rot = Rotation(PI / 2)
    assert float(residual_3d(rest_state(n), C3, pts, rotation=rot).abs().max()) <= 1e-8


def test_continuity_zero_without_velocity(rng):
    n = 20
    vals = {f: 0.0 for f in F3}
    first = {f: {c: rng.normal(size=n) for c in S3} for f in ("tau", "sal", "p")}
    j = jets3(vals, first, n=n)
    pts = np.column_stack([np.full(n, C3.r_e), np.full(n, 1.0), np.full(n, 2.0), np.zeros(n)])
    assert residual_3d(j, C3, pts)[:, 3].abs().max() == 0


def test_manufactured_fields_hand_residuals():
    # one point with hand-computed residuals
    R, th, ph = C3.r_e, 1.1, 0.4
    s, c = math.sin(th), math.cos(th)
    V, a, b, Wr, A, B = 0.3, 0.2, -0.05, 1e-6, 0.01, 2.0
    c3 = PdeConstants3D(residual_scales=(1, 1, 1, 1, 1, 1), zeta=5.0, zeta_tau=7.0, eta_tau=0.0)
    first = {
        "v_theta": {"theta": np.array([a])},
        "v_phi": {"phi": np.array([b])},
        "w": {"r": np.array([Wr])},
        "tau": {"t": np.array([A])},
        "p": {"r": np.array([-c3.rho0 * c3.g])},
    }
    second = {"tau": {"theta": np.array([B])}}
    vals = {"tau": c3.tau0, "sal": c3.sigma0, "v_phi": V, "v_theta": 0.0}
    j = jets3(vals, first, second)
    pt = np.array([[R, th, ph, 0.2]])
    r = residual_3d(j, c3, pt)[0].tolist()
    f = 2 * c3.omega_e * c
    rs2 = (R * s) ** 2
    # v_theta momentum: -V^2 cot/R - f V - zeta * (-2 cos * dvphi/dphi / (R s)^2)
    mom_t = -V * V * c / s / R - f * V - 5.0 * (-2 * c * b / rs2)
    # v_phi momentum: V * b/(R s) - zeta * (-V/(R s)^2)
    mom_p = V * b / (R * s) - 5.0 * (-V / rs2)
    cont = a / R + b / (R * s) + Wr
    temp = A - 7.0 * B / R**2
    want = [mom_t, mom_p, 0.0, cont, temp, 0.0]
    for got, exp_ in zip(r, want):
        assert got == pytest.approx(exp_, abs=1e-8, rel=1e-10)


def test_pole_singularity():
    pt = np.array([[C3.r_e, 1e-7, 0.0, 0.0]])
    with pytest.raises(physics.PoleSingularityError):
        residual_3d(rest_state(1), C3, pt)


def test_residual_scales_divide():
    c = PdeConstants3D(residual_scales=(2, 2, 2, 2, 2, 2))
    pts = np.array([[C3.r_e, 1.0, 1.0, 0.0]])
    j = jets3({"tau": C3.tau0 + 1.0, "sal": C3.sigma0}, n=1)
    r1 = residual_3d(j, C3, pts)
    r2 = residual_3d(j, c, pts)
    assert torch.allclose(r1 / 2, r2)


# --- initial and boundary conditions -------------------------------------------

D3 = Domain3D(theta_range=(0.5, 1.5), phi_range=(0.2, 1.2))


def test_initial_residual_zero_at_initial_values():
    pts = np.array([[C3.r_e - 10, 1.0, 0.5, 0.0]])
    j = jets3({"v_theta": 0.0, "v_phi": 0.0, "tau": 10.0, "sal": 35.0})
    assert physics.icbc_residual(j, C3, pts, "initial", D3).abs().max() == 0


def test_bottom_residual_zero():
    pts = np.array([[D3.r_range.lo, 1.0, 0.5, 0.3]])
    j = jets3({"tau": 2.0, "sal": 35.0})
    assert physics.icbc_residual(j, C3, pts, "bottom", D3).abs().max() == 0


def test_surface_heat_flux_fixture():
    alpha, tau_a, tau_s = 1e-3, 10.0, 12.5
    pts = np.array([[C3.r_e, 1.0, 0.5, 0.3]])
    # linear profile tau(r) = tau_s - alpha (tau_s - tau_a) (r - r_e)
    j = jets3({"tau": tau_s, "sal": 35.0}, {"tau": {"r": np.array([-alpha * (tau_s - tau_a)])}})
    r = physics.icbc_residual(j, C3, pts, "surface", D3)[0]
    assert abs(float(r[3])) <= 1e-10
    assert r.abs().max() <= 1e-10


def test_lateral_neumann_needs_normals_and_uses_them():
    pts = np.array([[C3.r_e - 100, 0.5, 0.7, 0.3]])
    with pytest.raises(ContractViolation):
        physics.icbc_residual(jets3({}), C3, pts, "lateral", D3)
    j = jets3({}, {"tau": {"theta": np.array([3.0])}, "sal": {"phi": np.array([5.0])}})
    r = physics.icbc_residual(j, C3, pts, "lateral", D3, normals=np.array([[-1.0, 0.0]]))[0]
    assert float(r[3]) == pytest.approx(-3.0 / C3.r_e)
    assert float(r[4]) == 0.0


def test_off_boundary_point_rejected():
    pts = np.array([[C3.r_e - 100, 1.0, 0.7, 0.3]])
    for tag in ("surface", "bottom", "lateral", "initial"):
        with pytest.raises(ContractViolation):
            physics.icbc_residual(jets3({}), C3, pts, tag, D3, normals=np.zeros((1, 2)))
    with pytest.raises(ContractViolation):
        physics.icbc_residual(_zero_jets(1), C2, np.array([[0.5, 0.5, 0.5]]), "surface", Domain2D())


def test_2d_icbc_exact_fields_zero(rng):
    dom = Domain2D()
    for tag, col, val in (("surface", 1, 1.0), ("bottom", 1, 0.0), ("lateral", 0, 1.0), ("initial", 2, 0.0)):
        pts = rng.uniform(0, 1, (30, 3))
        pts[:, col] = val
        r = physics.icbc_residual(exact_jets(pts), C2, pts, tag, dom)
        assert r.shape == (30, 4)
        assert float(r.abs().max()) <= 1e-14
