"""Residual operators for the 2D and spherical primitive equations.

2D system on ``(x, z, t)`` (dimensionless)::

    v_t + v v_x + w v_z - eta v_xx - zeta v_zz + p_x = 0
    p_z + tau = 0
    v_x + w_z = 0
    tau_t + v tau_x + w tau_z - eta_tau tau_xx - zeta_tau tau_zz - Q = 0

Spherical system on ``(r, theta, phi, t)``, thin-shell metric ``R = r_e``,
``s = sin(theta)``, ``c = cos(theta)``, ``cot = c / s``::

    grad_h p        = (p_theta / R, p_phi / (R s))
    adv(f)          = v_theta f_theta / R + v_phi f_phi / (R s)
    lap(f)          = (f_thth + cot f_th + f_phph / s^2) / R^2
    div v           = (v_theta_theta + cot v_theta) / R + v_phi_phi / (R s)
    (Lap v)_theta   = lap(v_theta) - 2 c v_phi_phi / (R s)^2 - v_theta / (R s)^2
    (Lap v)_phi     = lap(v_phi)   + 2 c v_theta_phi / (R s)^2 - v_phi / (R s)^2
    (v.grad v)_th   = adv(v_theta) - v_phi^2 cot / R
    (v.grad v)_phi  = adv(v_phi) + v_theta v_phi cot / R
    coriolis        = 2 omega cos(theta_geo) (-v_phi, v_theta)

Residuals, in order::

    mom_theta = v_theta_t + (v.grad v)_th + w v_theta_r + p_theta/(rho0 R) + coriolis_th
                - zeta (Lap v)_theta - eta v_theta_rr
    mom_phi   = (same with phi components)
    hydro     = p_r + rho g,  rho = rho0 (1 - beta_tau (tau - tau0) + beta_sigma (sigma - sigma0))
    cont      = div v + w_r
    temp      = tau_t + adv(tau) + w tau_r - zeta_tau lap(tau) - eta_tau tau_rr
    sal       = sal_t + adv(sal) + w sal_r - zeta_sigma lap(sal) - eta_sigma sal_rr

``r`` and ``r_a`` differ by the constant ``r_e`` so their derivatives agree.
Horizontal advection acts on both velocity components.  Each residual is
divided by a configurable scale so that SI magnitudes can be balanced.
``theta_geo`` is the geographic polar angle; inside a rotated chart it is
recovered through the inverse rotation so that the Earth's spin axis stays put.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch

from .autodiff import DTYPE, ContractViolation, Jet, NumericError
from .fielddata import DataField, make_field
from .geometry import EARTH_RADIUS, Domain2D, Domain3D, Rotation, inverse_rotate
from .network import density_from_state
from .oracle import TaylorGreenParams, exact

PI = math.pi

REQUIRED_2D = {
    "tau": ("t", "x", "z", "xx", "zz"),
    "v": ("t", "x", "z", "xx", "zz"),
    "w": ("z",),
    "p": ("x", "z"),
}
_HORIZ = ("t", "r", "theta", "phi", "rr", "thetatheta", "phiphi")
REQUIRED_3D = {
    "tau": _HORIZ,
    "sal": _HORIZ,
    "w": ("r",),
    "v_theta": _HORIZ,
    "v_phi": _HORIZ,
    "p": ("r", "theta", "phi"),
}
RESIDUALS_2D = ("momentum", "hydrostatic", "continuity", "temperature")
RESIDUALS_3D = ("momentum_theta", "momentum_phi", "hydrostatic", "continuity", "temperature", "salinity")

BOUNDARY_TAGS = ("surface", "bottom", "lateral", "initial")


class PoleSingularityError(ValueError):
    pass


def _lib(x):
    return torch if torch.is_tensor(x) else np


@dataclass(frozen=True)
class PdeConstants2D:
    """Coefficients of the 2D system.

    The values here are the configured (true) coefficients; names listed in
    ``unknown`` are estimated during training and the estimates are passed
    to the residual through ``coeffs``.  The source term and the default
    boundary data always use these configured values.
    """

    eta: float = 0.01
    zeta: float = 0.01
    eta_tau: float = 0.01
    zeta_tau: float = 0.02
    unknown: tuple[str, ...] = ("zeta", "zeta_tau")

    def __post_init__(self):
        for k in ("eta", "zeta", "eta_tau", "zeta_tau"):
            if not math.isfinite(getattr(self, k)):
                raise ValueError(f"{k} must be finite")
        bad = set(self.unknown) - {"eta", "zeta", "eta_tau", "zeta_tau"}
        if bad:
            raise ValueError(f"unknown coefficients must be PDE coefficients, got {sorted(bad)}")

    def taylor_green(self) -> TaylorGreenParams:
        return TaylorGreenParams(self.eta, self.zeta, self.zeta_tau)


def source_q(points, c: PdeConstants2D = PdeConstants2D()):
    """``Q = pi cos(2 pi x) sin(4 pi z) exp(-4 pi^2 (eta + zeta + zeta_tau) t)``."""
    pts = points
    lib = _lib(pts)
    if lib is np:
        pts = np.asarray(pts, dtype=float)
    x, z, t = pts[..., 0], pts[..., 1], pts[..., 2]
    rate = 4 * PI**2 * (c.eta + c.zeta + c.zeta_tau)
    return PI * lib.cos(2 * PI * x) * lib.sin(4 * PI * z) * lib.exp(-rate * t)


def _need(jets: Mapping[str, Jet], fld: str, name: str):
    if fld not in jets:
        raise ContractViolation(f"jets lack field {fld!r}")
    j = jets[fld]
    try:
        return j.d(name)
    except ContractViolation:
        raise ContractViolation(f"jets for {fld!r} lack derivative {name!r}") from None


def _coeff(c, coeffs, name):
    if coeffs is not None and name in coeffs:
        return coeffs[name]
    return getattr(c, name)


def residual_2d(jets: Mapping[str, Jet], c: PdeConstants2D, points, q=None, coeffs=None) -> torch.Tensor:
    """The four residuals at each point, shape ``(N, 4)`` in ``RESIDUALS_2D`` order.

    ``q`` overrides the source values (e.g. precomputed at collocation
    points); ``coeffs`` overrides coefficients by name (trainable estimates).
    """
    tau, v, w, p = (jets[f].val if f in jets else None for f in ("tau", "v", "w", "p"))
    for f, val in zip(("tau", "v", "w", "p"), (tau, v, w, p)):
        if val is None:
            raise ContractViolation(f"jets lack field {f!r}")
    eta, zeta = _coeff(c, coeffs, "eta"), _coeff(c, coeffs, "zeta")
    eta_tau, zeta_tau = _coeff(c, coeffs, "eta_tau"), _coeff(c, coeffs, "zeta_tau")
    if q is None:
        q = source_q(torch.as_tensor(np.asarray(points, dtype=float)), c)
    q = torch.as_tensor(q, dtype=DTYPE)

    v_t, v_x, v_z = _need(jets, "v", "t"), _need(jets, "v", "x"), _need(jets, "v", "z")
    v_xx, v_zz = _need(jets, "v", "xx"), _need(jets, "v", "zz")
    tau_t, tau_x, tau_z = _need(jets, "tau", "t"), _need(jets, "tau", "x"), _need(jets, "tau", "z")
    tau_xx, tau_zz = _need(jets, "tau", "xx"), _need(jets, "tau", "zz")
    w_z = _need(jets, "w", "z")
    p_x, p_z = _need(jets, "p", "x"), _need(jets, "p", "z")

    momentum = v_t + v * v_x + w * v_z - eta * v_xx - zeta * v_zz + p_x
    hydrostatic = p_z + tau
    continuity = v_x + w_z
    temperature = tau_t + v * tau_x + w * tau_z - eta_tau * tau_xx - zeta_tau * tau_zz - q
    return torch.stack([momentum, hydrostatic, continuity, temperature], dim=-1)


@dataclass(frozen=True)
class PdeConstants3D:
    """Constants of the spherical system plus boundary/initial data fields.

    Data fields accept numbers, expression strings or grid tables (see
    :mod:`mdrf.fielddata`).  ``lateral_mode`` selects Neumann tracers with
    no-slip velocity (``"neumann"``) or Dirichlet everywhere (``"dirichlet"``,
    using ``lateral_tau`` / ``lateral_sigma``).
    """

    rho0: float = 1025.0
    tau0: float = 10.0
    sigma0: float = 35.0
    omega_e: float = 7.2921e-5
    g: float = 9.81
    eta: float = 1e-2
    zeta: float = 1e3
    eta_tau: float = 1e-5
    zeta_tau: float = 1e3
    eta_sigma: float = 1e-5
    zeta_sigma: float = 1e3
    beta_tau: float = 2e-4
    beta_sigma: float = 8e-4
    alpha: float = 1e-3
    r_e: float = EARTH_RADIUS
    tau_a: object = 10.0
    b_tau: object = 2.0
    b_sigma: object = 35.0
    delta_v_theta: object = 0.0
    delta_v_phi: object = 0.0
    i_theta: object = 0.0
    i_phi: object = 0.0
    i_tau: object = 10.0
    i_sigma: object = 35.0
    lateral_tau: object = 10.0
    lateral_sigma: object = 35.0
    lateral_mode: str = "neumann"
    unknown: tuple[str, ...] = ("beta_tau", "beta_sigma")
    residual_scales: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    icbc_scales: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for k in ("rho0", "g", "alpha", "r_e"):
            if not getattr(self, k) > 0:
                raise ValueError(f"{k} must be positive")
        if self.lateral_mode not in ("neumann", "dirichlet"):
            raise ValueError("lateral_mode must be 'neumann' or 'dirichlet'")
        if len(self.residual_scales) != 6 or min(self.residual_scales) <= 0:
            raise ValueError("residual_scales needs six positive entries")

    def data_field(self, name: str) -> DataField:
        return make_field(getattr(self, name), ("r", "theta", "phi", "t"), self.r_e)


def _check_poles(theta: np.ndarray, tol: float = 1e-6) -> None:
    if np.any((theta < tol) | (theta > PI - tol)):
        raise PoleSingularityError(f"theta within {tol} of a pole; 1/sin(theta) is singular there")


def geographic_cos_theta(theta, phi, rotation: Rotation | None) -> np.ndarray:
    if rotation is None or rotation.is_identity:
        return np.cos(theta)
    theta_g, _ = inverse_rotate(theta, phi, rotation)
    return np.cos(theta_g)


def residual_3d(
    jets: Mapping[str, Jet],
    c: PdeConstants3D,
    points,
    coeffs=None,
    rotation: Rotation | None = None,
) -> torch.Tensor:
    """The six spherical residuals, shape ``(N, 6)`` in ``RESIDUALS_3D`` order."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    theta, phi = pts[:, 1], pts[:, 2]
    _check_poles(theta)
    R = c.r_e
    s = torch.as_tensor(np.sin(theta), dtype=DTYPE)
    cs = torch.as_tensor(np.cos(theta), dtype=DTYPE)
    cot = cs / s
    f_cor = torch.as_tensor(2 * c.omega_e * geographic_cos_theta(theta, phi, rotation), dtype=DTYPE)

    def g(fld, name):
        return _need(jets, fld, name)

    def val(fld):
        if fld not in jets:
            raise ContractViolation(f"jets lack field {fld!r}")
        return jets[fld].val

    vt, vp, w = val("v_theta"), val("v_phi"), val("w")
    tau, sal = val("tau"), val("sal")

    def adv(fld):
        return vt * g(fld, "theta") / R + vp * g(fld, "phi") / (R * s)

    def lap(fld):
        return (g(fld, "thetatheta") + cot * g(fld, "theta") + g(fld, "phiphi") / s**2) / R**2

    zeta, eta = _coeff(c, coeffs, "zeta"), _coeff(c, coeffs, "eta")
    zeta_tau, eta_tau = _coeff(c, coeffs, "zeta_tau"), _coeff(c, coeffs, "eta_tau")
    zeta_s, eta_s = _coeff(c, coeffs, "zeta_sigma"), _coeff(c, coeffs, "eta_sigma")
    beta_tau, beta_sigma = _coeff(c, coeffs, "beta_tau"), _coeff(c, coeffs, "beta_sigma")

    rs2 = (R * s) ** 2
    lap_vt = lap("v_theta") - 2 * cs * g("v_phi", "phi") / rs2 - vt / rs2
    lap_vp = lap("v_phi") + 2 * cs * g("v_theta", "phi") / rs2 - vp / rs2

    mom_t = (
        g("v_theta", "t")
        + adv("v_theta")
        - vp * vp * cot / R
        + w * g("v_theta", "r")
        + g("p", "theta") / (c.rho0 * R)
        - f_cor * vp
        - zeta * lap_vt
        - eta * g("v_theta", "rr")
    )
    mom_p = (
        g("v_phi", "t")
        + adv("v_phi")
        + vt * vp * cot / R
        + w * g("v_phi", "r")
        + g("p", "phi") / (c.rho0 * R * s)
        + f_cor * vt
        - zeta * lap_vp
        - eta * g("v_phi", "rr")
    )
    rho = density_from_state(tau, sal, beta_tau, beta_sigma, c.rho0, c.tau0, c.sigma0)
    hydro = g("p", "r") + rho * c.g
    cont = (g("v_theta", "theta") + cot * vt) / R + g("v_phi", "phi") / (R * s) + g("w", "r")
    temp = g("tau", "t") + adv("tau") + w * g("tau", "r") - zeta_tau * lap("tau") - eta_tau * g("tau", "rr")
    salt = g("sal", "t") + adv("sal") + w * g("sal", "r") - zeta_s * lap("sal") - eta_s * g("sal", "rr")
    out = torch.stack([mom_t, mom_p, hydro, cont, temp, salt], dim=-1)
    return out / torch.as_tensor(c.residual_scales, dtype=DTYPE)


# --- initial / boundary operators ---------------------------------------------


def _on_tag(domain, points: np.ndarray, which: str, tol: float = 1e-9) -> np.ndarray:
    def at(coord, bound):
        iv = domain.range_of(coord)
        ref = iv.lo if bound == "lo" else iv.hi
        return np.abs(points[:, domain.coords.index(coord)] - ref) <= tol * max(1.0, abs(ref))

    if which == "surface":
        return at(domain.vertical, "hi")
    if which == "bottom":
        return at(domain.vertical, "lo")
    if which == "initial":
        return at("t", "lo")
    if which == "lateral":
        m = np.zeros(len(points), dtype=bool)
        for h in domain.horizontal:
            if h == "phi" and getattr(domain, "phi_periodic", False):
                continue
            m |= at(h, "lo") | at(h, "hi")
        return m
    raise ContractViolation(f"unknown boundary tag {which!r}; expected one of {BOUNDARY_TAGS}")


def check_on_boundary(domain, points, which: str) -> None:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    ok = _on_tag(domain, pts, which)
    if not np.all(ok):
        bad = pts[~ok][0].tolist()
        raise ContractViolation(f"point {bad} is not on the {which!r} boundary")


ICBC_REQUIRED_3D = {
    "surface": {"v_theta": ("r",), "v_phi": ("r",), "w": (), "tau": ("r",), "sal": ("r",)},
    "bottom": {"v_theta": (), "v_phi": (), "w": (), "tau": (), "sal": ()},
    "lateral": {"v_theta": (), "v_phi": (), "w": (), "tau": ("theta", "phi"), "sal": ("theta", "phi")},
    "initial": {"v_theta": (), "v_phi": (), "tau": (), "sal": ()},
}


def boundary_targets_2d(points, c: PdeConstants2D, data=None) -> dict[str, np.ndarray]:
    """Dirichlet data for the 2D pieces; defaults to the closed-form solution."""
    if data is None:
        return exact(points, c.taylor_green())
    return {k: np.asarray(f(points), dtype=float) for k, f in data.items()}


def icbc_residual_2d(jets, c: PdeConstants2D, points, which: str, domain: Domain2D, targets=None, check=True):
    """Dirichlet residuals ``u - b`` for ``tau, v, w, p`` on one boundary piece; ``(N, 4)``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if check:
        check_on_boundary(domain, pts, which)
    if targets is None:
        targets = boundary_targets_2d(pts, c)
    cols = []
    for f in ("tau", "v", "w", "p"):
        if f not in jets:
            raise ContractViolation(f"jets lack field {f!r}")
        cols.append(jets[f].val - torch.as_tensor(targets[f], dtype=DTYPE))
    return torch.stack(cols, dim=-1)


def boundary_targets_3d(points, c: PdeConstants3D, which: str) -> dict[str, np.ndarray]:
    names = {
        "surface": ("delta_v_theta", "delta_v_phi", "tau_a"),
        "bottom": ("b_tau", "b_sigma"),
        "lateral": ("lateral_tau", "lateral_sigma"),
        "initial": ("i_theta", "i_phi", "i_tau", "i_sigma"),
    }[which]
    return {n: c.data_field(n)(points) for n in names}


def icbc_residual_3d(
    jets,
    c: PdeConstants3D,
    points,
    which: str,
    domain: Domain3D,
    normals=None,
    targets=None,
    check: bool = True,
) -> torch.Tensor:
    """Residuals of the initial and boundary conditions on one tagged piece.

    * surface: ``v_r - delta_v`` (2), ``w``, ``tau_r + alpha (tau - tau_a)``, ``sal_r``
    * bottom: ``v`` (2), ``w``, ``tau - b_tau``, ``sal - b_sigma``
    * lateral: ``v`` (2), ``w`` and either normal derivatives of ``tau``, ``sal``
      (``normals`` gives the outward unit normal as ``(n_theta, n_phi)`` per
      point) or Dirichlet values, per ``c.lateral_mode``
    * initial: ``v - i`` (2), ``tau - i_tau``, ``sal - i_sigma``
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if check:
        check_on_boundary(domain, pts, which)
    if targets is None:
        targets = boundary_targets_3d(pts, c, which)
    T = lambda name: torch.as_tensor(targets[name], dtype=DTYPE)

    def val(fld):
        if fld not in jets:
            raise ContractViolation(f"jets lack field {fld!r}")
        return jets[fld].val

    if which == "surface":
        cols = [
            _need(jets, "v_theta", "r") - T("delta_v_theta"),
            _need(jets, "v_phi", "r") - T("delta_v_phi"),
            val("w"),
            _need(jets, "tau", "r") + c.alpha * (val("tau") - T("tau_a")),
            _need(jets, "sal", "r"),
        ]
    elif which == "bottom":
        cols = [val("v_theta"), val("v_phi"), val("w"), val("tau") - T("b_tau"), val("sal") - T("b_sigma")]
    elif which == "lateral":
        cols = [val("v_theta"), val("v_phi"), val("w")]
        if c.lateral_mode == "neumann":
            if normals is None:
                raise ContractViolation("Neumann lateral conditions need outward normals")
            n = np.atleast_2d(np.asarray(normals, dtype=float))
            _check_poles(pts[:, 1])
            n_t = torch.as_tensor(n[:, 0], dtype=DTYPE) / c.r_e
            n_p = torch.as_tensor(n[:, 1] / np.sin(pts[:, 1]), dtype=DTYPE) / c.r_e
            for fld in ("tau", "sal"):
                cols.append(n_t * _need(jets, fld, "theta") + n_p * _need(jets, fld, "phi"))
        else:
            cols += [val("tau") - T("lateral_tau"), val("sal") - T("lateral_sigma")]
    elif which == "initial":
        cols = [val("v_theta") - T("i_theta"), val("v_phi") - T("i_phi"), val("tau") - T("i_tau"), val("sal") - T("i_sigma")]
    else:
        raise ContractViolation(f"unknown boundary tag {which!r}")
    out = torch.stack(cols, dim=-1)
    scale = c.icbc_scales.get(which)
    return out / scale if scale else out


def icbc_residual(jets, c, points, which: str, domain, **kw) -> torch.Tensor:
    """Dispatch to the 2D or 3D boundary operator by constants type."""
    if isinstance(c, PdeConstants2D):
        return icbc_residual_2d(jets, c, points, which, domain, **kw)
    if isinstance(c, PdeConstants3D):
        return icbc_residual_3d(jets, c, points, which, domain, **kw)
    raise TypeError(f"unsupported constants {type(c).__name__}")


def icbc_required(mode: str, which: str, lateral_mode: str = "neumann") -> dict[str, tuple[str, ...]]:
    if mode == "2d":
        return {f: () for f in ("tau", "v", "w", "p")}
    req = dict(ICBC_REQUIRED_3D[which])
    if which == "lateral" and lateral_mode == "dirichlet":
        req["tau"], req["sal"] = (), ()
    return req


def check_residual_finite(res: torch.Tensor, points, term: str) -> None:
    if not torch.isfinite(res).all():
        idx = int((~torch.isfinite(res)).any(dim=-1).nonzero()[0])
        raise NumericError(f"non-finite {term} residual at point #{idx} {np.asarray(points)[idx].tolist()}")
