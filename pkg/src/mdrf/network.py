"""Parallel tanh network with a shared first layer.

One affine layer ``C_1`` (input -> ``shared_width``) followed by tanh feeds
one fully connected subnetwork per field.  A field of depth ``K`` has
``K - 1`` affine maps above the shared layer: ``K - 2`` hidden
``width -> width`` maps with tanh, then a ``width -> 1`` output map.

Parameters live in :class:`ModelParams` together with the unknown PDE
coefficients, which the optimizer updates alongside the weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch

from .autodiff import DTYPE, ContractViolation, DerivRequest, Jet, NumericError
from .geometry import Normalizer

FIELDS_2D = ("tau", "v", "w", "p")
FIELDS_3D = ("tau", "sal", "w", "v_theta", "v_phi", "p")
COORDS_2D = ("x", "z", "t")
COORDS_3D = ("r", "theta", "phi", "t")

SNAPSHOT_FORMAT = "mdrf-snapshot"
SNAPSHOT_VERSION = 1


def default_depths(fields: Iterable[str]) -> dict[str, int]:
    # temperature and salinity subnets are shallower
    return {f: (3 if f in ("tau", "sal") else 5) for f in fields}


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    fields: tuple[str, ...]
    depths: Mapping[str, int]
    shared_width: int = 128
    hidden_width: int = 128

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        object.__setattr__(self, "depths", {f: int(self.depths[f]) for f in self.fields})
        if self.input_dim not in (3, 4):
            raise ValueError(f"input_dim must be 3 (2D) or 4 (3D), got {self.input_dim}")
        expected = 4 if self.input_dim == 3 else 6
        if len(self.fields) != expected:
            raise ValueError(f"{self.input_dim}-input network needs {expected} fields, got {len(self.fields)}")
        if min(self.depths.values()) < 2:
            raise ValueError("subnet depths must be >= 2")
        if self.shared_width < 1 or self.hidden_width < 1:
            raise ValueError("widths must be >= 1")

    @classmethod
    def for_mode(cls, mode: str, shared_width: int = 128, hidden_width: int = 128, depths=None) -> "NetworkSpec":
        fields = FIELDS_2D if mode == "2d" else FIELDS_3D
        d = default_depths(fields)
        d.update(depths or {})
        return cls(3 if mode == "2d" else 4, fields, d, shared_width, hidden_width)

    def layer_shapes(self, fld: str) -> list[tuple[int, int]]:
        """(out, in) shapes of the subnet's affine maps above the shared layer."""
        k = self.depths[fld]
        shapes = []
        d_in = self.shared_width
        for _ in range(k - 2):
            shapes.append((self.hidden_width, d_in))
            d_in = self.hidden_width
        shapes.append((1, d_in))
        return shapes

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "fields": list(self.fields),
            "depths": dict(self.depths),
            "shared_width": self.shared_width,
            "hidden_width": self.hidden_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(int(d["input_dim"]), tuple(d["fields"]), dict(d["depths"]), int(d["shared_width"]), int(d["hidden_width"]))


def parameter_count(spec: NetworkSpec, n_pde: int = 0) -> int:
    """Closed-form count: sum of (d_in + 1) * d_out over every affine map."""
    total = (spec.input_dim + 1) * spec.shared_width
    for f in spec.fields:
        total += sum((i + 1) * o for o, i in spec.layer_shapes(f))
    return total + n_pde


@dataclass
class ModelParams:
    spec: NetworkSpec
    shared: tuple[torch.Tensor, torch.Tensor]
    subnets: dict[str, list[tuple[torch.Tensor, torch.Tensor]]]
    pde: dict[str, torch.Tensor] = field(default_factory=dict)

    def weight_tensors(self) -> list[torch.Tensor]:
        out = list(self.shared)
        for f in self.spec.fields:
            for w, b in self.subnets[f]:
                out += [w, b]
        return out

    def pde_tensors(self) -> list[torch.Tensor]:
        return list(self.pde.values())

    def tensors(self) -> list[torch.Tensor]:
        """Every trainable tensor in canonical order (weights, then PDE coefficients)."""
        return self.weight_tensors() + self.pde_tensors()

    def subnet_tensors(self, fld: str) -> list[torch.Tensor]:
        return [t for wb in self.subnets[fld] for t in wb]

    def flatten(self) -> np.ndarray:
        return torch.cat([t.detach().reshape(-1) for t in self.tensors()]).numpy().copy()

    def load_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.size:
            raise ContractViolation(f"flat vector has {flat.size} entries, model has {self.size}")
        pos = 0
        with torch.no_grad():
            for t in self.tensors():
                n = t.numel()
                t.copy_(torch.from_numpy(flat[pos : pos + n].reshape(t.shape)))
                pos += n

    @property
    def size(self) -> int:
        return sum(t.numel() for t in self.tensors())

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.tensors():
            t.requires_grad_(flag)
        return self

    def clone(self) -> "ModelParams":
        c = lambda t: t.detach().clone()
        return ModelParams(
            self.spec,
            (c(self.shared[0]), c(self.shared[1])),
            {f: [(c(w), c(b)) for w, b in layers] for f, layers in self.subnets.items()},
            {k: c(v) for k, v in self.pde.items()},
        )

    def pde_values(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in self.pde.items()}

    def check_finite(self) -> None:
        for i, t in enumerate(self.tensors()):
            if not torch.isfinite(t).all():
                raise NumericError(f"non-finite entries in parameter tensor #{i}")


def _glorot(rng: np.random.Generator, d_out: int, d_in: int) -> torch.Tensor:
    limit = math.sqrt(6.0 / (d_in + d_out))
    return torch.from_numpy(rng.uniform(-limit, limit, size=(d_out, d_in)))


def init(spec: NetworkSpec, seed: int, pde_init: Mapping[str, float] | None = None) -> ModelParams:
    """Glorot-uniform weights, zero biases; PDE coefficients from ``pde_init``."""
    rng = np.random.default_rng(seed)
    shared = (_glorot(rng, spec.shared_width, spec.input_dim), torch.zeros(spec.shared_width, dtype=DTYPE))
    subnets = {}
    for f in spec.fields:
        subnets[f] = [(_glorot(rng, o, i), torch.zeros(o, dtype=DTYPE)) for o, i in spec.layer_shapes(f)]
    pde = {k: torch.tensor(float(v), dtype=DTYPE) for k, v in (pde_init or {}).items()}
    return ModelParams(spec, shared, subnets, pde)


def zeros_like_spec(spec: NetworkSpec, pde_names: Iterable[str] = ()) -> ModelParams:
    p = init(spec, 0, {k: 0.0 for k in pde_names})
    p.load_flat(np.zeros(p.size))
    return p


def _subnet_forward(h: torch.Tensor, layers) -> torch.Tensor:
    for w, b in layers[:-1]:
        h = torch.tanh(h @ w.T + b)
    w, b = layers[-1]
    return h @ w.T + b


def forward(params: ModelParams, points) -> torch.Tensor:
    """Field values at normalized ``points``; returns ``(N, n_fields)``."""
    x = torch.as_tensor(points, dtype=DTYPE)
    squeeze = x.dim() == 1
    x = torch.atleast_2d(x)
    w1, b1 = params.shared
    h = torch.tanh(x @ w1.T + b1)
    out = torch.cat([_subnet_forward(h, params.subnets[f]) for f in params.spec.fields], dim=1)
    if not torch.isfinite(out).all():
        params.check_finite()
        raise NumericError("non-finite network output")
    return out[0] if squeeze else out


def forward_fields(params: ModelParams, points, fields: Iterable[str] | None = None) -> dict[str, torch.Tensor]:
    """Values of selected fields at normalized points, evaluating only those subnets."""
    x = torch.atleast_2d(torch.as_tensor(points, dtype=DTYPE))
    w1, b1 = params.shared
    h = torch.tanh(x @ w1.T + b1)
    return {f: _subnet_forward(h, params.subnets[f])[:, 0] for f in (fields or params.spec.fields)}


def _as_request(needed, coords) -> DerivRequest:
    if isinstance(needed, DerivRequest):
        return needed
    return DerivRequest.parse(needed, coords)


def field_jets(
    params: ModelParams,
    points,
    normalizer: Normalizer,
    needed: Mapping[str, Iterable[str]] | DerivRequest,
    check: bool = True,
) -> dict[str, Jet]:
    """Jets of the requested fields at physical ``points``.

    Only fields named in ``needed`` are evaluated and each subnet propagates
    only the derivative channels requested for it.
    """
    coords = normalizer.coords
    if isinstance(needed, DerivRequest):
        requests = {f: needed for f in params.spec.fields}
    else:
        requests = {f: _as_request(v, coords) for f, v in needed.items()}
    unknown = set(requests) - set(params.spec.fields)
    if unknown:
        raise ContractViolation(f"unknown fields requested: {sorted(unknown)}")
    union = DerivRequest()
    for r in requests.values():
        union = union | r
    pts = np.asarray(points, dtype=float) if not torch.is_tensor(points) else points.numpy()
    xn = normalizer.normalize(pts, check=check)
    seed = Jet.seed(xn, coords, union, scale=normalizer.scale)
    w1, b1 = params.shared
    h0 = seed.affine(w1, b1).tanh()
    out = {}
    for f, req in requests.items():
        h = h0.restrict(req)
        layers = params.subnets[f]
        for w, b in layers[:-1]:
            h = h.affine(w, b).tanh()
        w, b = layers[-1]
        out[f] = h.affine(w, b)[..., 0]
    if check:
        for f, j in out.items():
            if not torch.isfinite(j.val).all():
                params.check_finite()
                j.check_finite(f"field {f}")
    return out


def density_from_state(tau, sigma, beta_tau, beta_sigma, rho0: float, tau0: float, sigma0: float):
    """Linear equation of state ``rho0 * (1 - beta_tau (tau - tau0) + beta_sigma (sigma - sigma0))``."""
    return rho0 * (1.0 - beta_tau * (tau - tau0) + beta_sigma * (sigma - sigma0))


# --- snapshots ----------------------------------------------------------------


def snapshot_dict(params: ModelParams, normalizer: Normalizer, mode: str, extra: dict | None = None) -> dict:
    """JSON-ready snapshot: header plus a flat float64 list in canonical order.

    Floats are written with ``repr`` precision so reloading is bit-exact.
    """
    return {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "mode": mode,
        "spec": params.spec.to_dict(),
        "pde_params": list(params.pde.keys()),
        "normalizer": normalizer.to_dict(),
        "extra": extra or {},
        "n_params": params.size,
        "params": params.flatten().tolist(),
    }


def params_from_snapshot(data: dict) -> tuple[ModelParams, Normalizer, str]:
    if data.get("format") != SNAPSHOT_FORMAT:
        raise ContractViolation(f"not a model snapshot (format={data.get('format')!r})")
    if data.get("version") != SNAPSHOT_VERSION:
        raise ContractViolation(f"unsupported snapshot version {data.get('version')!r}")
    spec = NetworkSpec.from_dict(data["spec"])
    params = zeros_like_spec(spec, data["pde_params"])
    params.load_flat(np.asarray(data["params"], dtype=float))
    return params, Normalizer.from_dict(data["normalizer"]), data["mode"]


def save_snapshot(path, params: ModelParams, normalizer: Normalizer, mode: str, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(snapshot_dict(params, normalizer, mode, extra)) + "\n", encoding="utf-8")


def load_snapshot(path) -> tuple[ModelParams, Normalizer, str, dict]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    params, norm, mode = params_from_snapshot(data)
    return params, norm, mode, data.get("extra", {})
