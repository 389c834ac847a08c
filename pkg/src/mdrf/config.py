"""Run configuration: a JSON document validated against a strict schema.

Unknown keys are rejected at every level.  ``RunConfig.model_json_schema()``
(or ``mdrf schema``) prints the published schema.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import physics
from .ensemble import EnsembleSpec
from .geometry import Domain2D, Domain3D, domain_from_dict
from .network import FIELDS_2D, FIELDS_3D, NetworkSpec
from .oracle import DataRegion, RoundedRect
from .training import TrainConfig, Unknown


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


Range = tuple[float, float]


class DomainConfig(_Strict):
    x_range: Optional[Range] = None
    z_range: Optional[Range] = None
    r_range: Optional[Range] = None
    theta_range: Optional[Range] = None
    phi_range: Optional[Range] = None
    t_range: Optional[Range] = None
    r_e: Optional[float] = None


class NetworkConfig(_Strict):
    shared_width: int = Field(128, ge=1)
    hidden_width: int = Field(128, ge=1)
    depths: Optional[dict[str, int]] = None


class UnknownConfig(_Strict):
    init: float = 0.0
    lower: float = 0.0


class PhysicsConfig(_Strict):
    constants: dict[str, object] = Field(default_factory=dict)
    unknown: dict[str, UnknownConfig] = Field(default_factory=dict)


class SamplingConfig(_Strict):
    n_interior: int = Field(10000, ge=1)
    n_per_piece: int = Field(1000, ge=1)
    seed: int = 0
    mode: Literal["uniform", "gridded"] = "uniform"


class TrainingConfig(_Strict):
    step1_iters: int = Field(5000, ge=0)
    step2_iters: int = Field(45000, ge=0)
    learning_rate: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    lambda1: float = Field(1.0, ge=0)
    lambda2: float = Field(1.0, ge=0)
    seed: int = 0
    checkpoint_every: int = Field(100, ge=1)


class EnsembleConfig(_Strict):
    n_ro: int = Field(2, ge=1)
    weight_variant: Literal["paper-verbatim", "pole-symmetric"] = "paper-verbatim"
    pole_margin: float = Field(1e-3, ge=0)


class RectConfig(_Strict):
    cx: float
    cz: float
    half_x: float = Field(gt=0)
    half_z: float = Field(gt=0)
    radius: float = Field(0.0, ge=0)


class DataConfig(_Strict):
    mask: list[RectConfig] = Field(default_factory=list)
    time_epoch: str = "2000-01-01T00:00:00+00:00"
    time_unit_seconds: float = Field(86400.0, gt=0)


class RunConfig(_Strict):
    mode: Literal["2d", "3d"]
    domain: DomainConfig = DomainConfig()
    network: NetworkConfig = NetworkConfig()
    physics: PhysicsConfig = PhysicsConfig()
    sampling: SamplingConfig = SamplingConfig()
    training: TrainingConfig = TrainingConfig()
    ensemble: EnsembleConfig = EnsembleConfig()
    data: DataConfig = DataConfig()
    paths: dict[str, str] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_mode(self):
        d = self.domain.model_dump(exclude_none=True)
        allowed = {"2d": {"x_range", "z_range", "t_range"}, "3d": {"r_range", "theta_range", "phi_range", "t_range", "r_e"}}[self.mode]
        bad = set(d) - allowed
        if bad:
            raise ValueError(f"domain keys {sorted(bad)} are not valid in {self.mode} mode")
        self.build_domain()
        cls = physics.PdeConstants2D if self.mode == "2d" else physics.PdeConstants3D
        names = {f.name for f in dataclasses.fields(cls)} - {"unknown"}
        bad = set(self.physics.constants) - names
        if bad:
            raise ValueError(f"physics.constants keys {sorted(bad)} are not constants of the {self.mode} system")
        coeffs = {"2d": {"eta", "zeta", "eta_tau", "zeta_tau"}, "3d": {"eta", "zeta", "eta_tau", "zeta_tau", "eta_sigma", "zeta_sigma", "beta_tau", "beta_sigma"}}[self.mode]
        bad = set(self.physics.unknown) - coeffs
        if bad:
            raise ValueError(f"physics.unknown keys {sorted(bad)} are not coefficients of the {self.mode} system")
        if self.network.depths:
            fields = FIELDS_2D if self.mode == "2d" else FIELDS_3D
            bad = set(self.network.depths) - set(fields)
            if bad:
                raise ValueError(f"network.depths keys {sorted(bad)} are not fields of the {self.mode} system")
        if self.mode == "3d" and self.data.mask:
            raise ValueError("data.mask applies to 2d mode only")
        self.build_constants()
        return self

    # --- builders -------------------------------------------------------------

    def build_domain(self):
        d = self.domain.model_dump(exclude_none=True)
        if self.mode == "3d" and "r_e" in d and "r_range" not in d:
            d["r_range"] = (d["r_e"] - 2000.0, d["r_e"])
        return domain_from_dict(self.mode, d)

    def unknowns(self) -> tuple[Unknown, ...]:
        if self.physics.unknown:
            return tuple(Unknown(k, v.init, v.lower) for k, v in self.physics.unknown.items())
        default = physics.PdeConstants2D.unknown if self.mode == "2d" else physics.PdeConstants3D.unknown
        return tuple(Unknown(k) for k in default)

    def build_constants(self):
        kw = dict(self.physics.constants)
        kw["unknown"] = tuple(u.name for u in self.unknowns())
        if self.mode == "2d":
            return physics.PdeConstants2D(**kw)
        for k in ("residual_scales",):
            if k in kw:
                kw[k] = tuple(kw[k])
        if "r_e" not in kw and self.domain.r_e is not None:
            kw["r_e"] = self.domain.r_e
        return physics.PdeConstants3D(**kw)

    def build_network(self) -> NetworkSpec:
        n = self.network
        return NetworkSpec.for_mode(self.mode, n.shared_width, n.hidden_width, n.depths)

    def build_train(self) -> TrainConfig:
        t = self.training
        return TrainConfig(
            step1_iters=t.step1_iters,
            step2_iters=t.step2_iters,
            learning_rate=t.learning_rate,
            betas=(t.beta1, t.beta2),
            eps=t.eps,
            lambda1=t.lambda1,
            lambda2=t.lambda2,
            seed=t.seed,
            unknowns=self.unknowns(),
            checkpoint_every=t.checkpoint_every,
        )

    def build_ensemble(self) -> EnsembleSpec:
        n = 1 if self.mode == "2d" else self.ensemble.n_ro
        return EnsembleSpec(n, self.ensemble.weight_variant)

    def build_region(self) -> DataRegion:
        rects = tuple(RoundedRect(**r.model_dump()) for r in self.data.mask)
        return DataRegion(self.build_domain(), rects)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


class ConfigError(ValueError):
    """Schema violation; the message names the offending field path."""


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for e in exc.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def parse_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError("<root>: the config must be a JSON object")
    return parse_config(data)


def json_schema() -> dict:
    return RunConfig.model_json_schema()
