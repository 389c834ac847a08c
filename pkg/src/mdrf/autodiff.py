"""Truncated second-order forward jets over torch tensors.

A :class:`Jet` carries a value together with first partials with respect to
a chosen set of input coordinates and *pure* second partials (``d2/dx2``)
for a subset of those.  Mixed second partials are never formed; the
residual operators only need Laplacian-type terms.

Jets compose exactly through affine maps and the elementary functions used
by the networks and the closed-form oracles, so input derivatives are exact
up to floating point.  Because every channel is an ordinary torch tensor,
reverse-mode autograd through a jet computation yields exact gradients of
any loss built from those input derivatives (forward-over-reverse).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

DTYPE = torch.float64

Zero = 0.0


class NumericError(FloatingPointError):
    """Non-finite value encountered during evaluation."""


class ContractViolation(ValueError):
    """A caller asked for something the inputs do not provide."""


def _is_zero(a) -> bool:
    return isinstance(a, float) and a == 0.0


def _mul(a, b):
    if _is_zero(a) or _is_zero(b):
        return Zero
    return a * b


def _add(a, b):
    if _is_zero(a):
        return b
    if _is_zero(b):
        return a
    return a + b


def _sub(a, b):
    if _is_zero(b):
        return a
    if _is_zero(a):
        return -b
    return a - b


def _neg(a):
    return Zero if _is_zero(a) else -a


@dataclass(frozen=True)
class DerivRequest:
    """Which input derivatives to propagate.

    ``first`` holds coordinate names, ``second`` the coordinates whose pure
    second derivative is wanted (always a subset of ``first``).
    """

    first: frozenset = frozenset()
    second: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "first", frozenset(self.first) | frozenset(self.second))
        object.__setattr__(self, "second", frozenset(self.second))

    @classmethod
    def parse(cls, names: Iterable[str], coords: Iterable[str]) -> "DerivRequest":
        """Build from names like ``"t"``, ``"x"``, ``"xx"``, ``"thetatheta"``."""
        coords = list(coords)
        first, second = set(), set()
        for name in names:
            if name in coords:
                first.add(name)
                continue
            half = len(name) // 2
            if len(name) % 2 == 0 and name[:half] == name[half:] and name[:half] in coords:
                second.add(name[:half])
                continue
            raise ContractViolation(f"unsupported derivative request {name!r} for coords {coords}")
        return cls(frozenset(first), frozenset(second))

    def __or__(self, other: "DerivRequest") -> "DerivRequest":
        return DerivRequest(self.first | other.first, self.second | other.second)

    def names(self) -> list[str]:
        return sorted(self.first) + sorted(c + c for c in self.second)


class Jet:
    """Value plus selected first and pure-second input partials.

    Channels may be broadcast-compatible rather than equal in shape; a
    channel stored as the float ``0.0`` is a structural zero.
    """

    __slots__ = ("val", "d1", "d2")
    __array_priority__ = 1000

    def __init__(self, val, d1: Mapping | None = None, d2: Mapping | None = None):
        self.val = val
        self.d1 = dict(d1 or {})
        self.d2 = dict(d2 or {})
        missing = set(self.d2) - set(self.d1)
        if missing:
            raise ContractViolation(f"second derivative without first for {sorted(missing)}")

    # -- construction ---------------------------------------------------------

    @classmethod
    def seed(cls, points, coords, request: DerivRequest, scale=None) -> "Jet":
        """Vector jet for an ``(N, D)`` array of input coordinates.

        ``scale[k]`` is ``d(input_k)/d(coordinate_k)``; use it to push
        derivatives through a normalization so that they come out with
        respect to physical coordinates.
        """
        x = torch.as_tensor(points, dtype=DTYPE)
        dim = x.shape[-1]
        coords = list(coords)
        if len(coords) != dim:
            raise ContractViolation(f"{dim} input columns but coords {coords}")
        unknown = set(request.first) - set(coords)
        if unknown:
            raise ContractViolation(f"derivatives requested for unknown coords {sorted(unknown)}")
        scale = np.ones(dim) if scale is None else np.asarray(scale, dtype=float)
        d1, d2 = {}, {}
        for c in sorted(request.first):
            k = coords.index(c)
            e = torch.zeros(dim, dtype=DTYPE)
            e[k] = float(scale[k])
            d1[c] = e
        for c in sorted(request.second):
            d2[c] = Zero
        return cls(x, d1, d2)

    def constant_like(self, value) -> "Jet":
        return Jet(value, {c: Zero for c in self.d1}, {c: Zero for c in self.d2})

    def _promote(self, other) -> "Jet":
        if isinstance(other, Jet):
            if other.d1.keys() != self.d1.keys() or other.d2.keys() != self.d2.keys():
                raise ContractViolation("jets track different derivative sets")
            return other
        return self.constant_like(other)

    # -- access ---------------------------------------------------------------

    @property
    def value(self):
        return self.val

    def d(self, name: str):
        """Derivative channel by name (``"x"`` or ``"xx"``), zeros broadcast to value shape."""
        if name in self.d1:
            ch = self.d1[name]
        else:
            half = len(name) // 2
            if len(name) % 2 == 0 and name[:half] == name[half:] and name[:half] in self.d2:
                ch = self.d2[name[:half]]
            else:
                raise ContractViolation(f"derivative {name!r} not tracked by this jet")
        if _is_zero(ch):
            return torch.zeros_like(torch.as_tensor(self.val, dtype=DTYPE))
        return torch.broadcast_to(ch, torch.as_tensor(self.val).shape)

    def has(self, name: str) -> bool:
        try:
            self.d(name)
        except ContractViolation:
            return False
        return True

    def restrict(self, request: DerivRequest) -> "Jet":
        """Drop channels not in ``request`` (all requested ones must exist)."""
        for c in request.first:
            if c not in self.d1:
                raise ContractViolation(f"jet lacks first derivative in {c!r}")
        for c in request.second:
            if c not in self.d2:
                raise ContractViolation(f"jet lacks second derivative in {c!r}")
        return Jet(self.val, {c: self.d1[c] for c in sorted(request.first)}, {c: self.d2[c] for c in sorted(request.second)})

    def __getitem__(self, idx) -> "Jet":
        def take(ch):
            if _is_zero(ch):
                return ch
            if ch.dim() < torch.as_tensor(self.val).dim():
                # broadcast channel: index only the trailing axes it owns
                return torch.broadcast_to(ch, self.val.shape)[idx]
            return ch[idx]

        return Jet(self.val[idx], {c: take(v) for c, v in self.d1.items()}, {c: take(v) for c, v in self.d2.items()})

    def __repr__(self):
        return f"Jet(val={self.val!r}, d1={sorted(self.d1)}, d2={sorted(self.d2)})"

    # -- linear structure -----------------------------------------------------

    def __add__(self, other):
        o = self._promote(other)
        return Jet(
            self.val + o.val,
            {c: _add(self.d1[c], o.d1[c]) for c in self.d1},
            {c: _add(self.d2[c], o.d2[c]) for c in self.d2},
        )

    __radd__ = __add__

    def __neg__(self):
        return Jet(-self.val, {c: _neg(v) for c, v in self.d1.items()}, {c: _neg(v) for c, v in self.d2.items()})

    def __sub__(self, other):
        o = self._promote(other)
        return Jet(
            self.val - o.val,
            {c: _sub(self.d1[c], o.d1[c]) for c in self.d1},
            {c: _sub(self.d2[c], o.d2[c]) for c in self.d2},
        )

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Jet):
            return Jet(
                self.val * other,
                {c: _mul(v, other) for c, v in self.d1.items()},
                {c: _mul(v, other) for c, v in self.d2.items()},
            )
        o = self._promote(other)
        d1 = {c: _add(_mul(self.d1[c], o.val), _mul(self.val, o.d1[c])) for c in self.d1}
        d2 = {
            c: _add(
                _add(_mul(self.d2[c], o.val), _mul(self.val, o.d2[c])),
                _mul(2.0, _mul(self.d1[c], o.d1[c])),
            )
            for c in self.d2
        }
        return Jet(self.val * o.val, d1, d2)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Jet):
            return self * (1.0 / other)
        return self * other.reciprocal()

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def __pow__(self, n):
        if not isinstance(n, (int, float)):
            raise ContractViolation("only constant exponents are supported")
        if n == 2:
            return self * self
        v = self.val
        return self._chain(v**n, n * v ** (n - 1), n * (n - 1) * v ** (n - 2))

    # -- nonlinear maps -------------------------------------------------------

    def _chain(self, f, df, d2f) -> "Jet":
        """Compose with a scalar function given its value and derivatives at ``val``."""
        d1 = {c: _mul(df, v) for c, v in self.d1.items()}
        d2 = {c: _add(_mul(df, self.d2[c]), _mul(d2f, _mul(self.d1[c], self.d1[c]))) for c in self.d2}
        return Jet(f, d1, d2)

    def reciprocal(self):
        inv = 1.0 / self.val
        return self._chain(inv, -inv * inv, 2.0 * inv * inv * inv)

    def tanh(self) -> "Jet":
        y = torch.tanh(self.val)
        s = 1.0 - y * y
        d1 = {c: _mul(s, v) for c, v in self.d1.items()}
        # d2 tanh(a) = s*a'' - 2*y*s*a'^2 = s*a'' - 2*y*(s*a')*a'
        d2 = {c: _sub(_mul(s, self.d2[c]), _mul(2.0 * y, _mul(d1[c], self.d1[c]))) for c in self.d2}
        return Jet(y, d1, d2)

    def sin(self) -> "Jet":
        s, c = torch.sin(self.val), torch.cos(self.val)
        return self._chain(s, c, -s)

    def cos(self) -> "Jet":
        s, c = torch.sin(self.val), torch.cos(self.val)
        return self._chain(c, -s, -c)

    def exp(self) -> "Jet":
        e = torch.exp(self.val)
        return self._chain(e, e, e)

    def sqrt(self) -> "Jet":
        r = torch.sqrt(self.val)
        return self._chain(r, 0.5 / r, -0.25 / (r * self.val))

    def affine(self, weight, bias=None) -> "Jet":
        """``x @ weight.T + bias`` applied to the last axis of every channel."""
        wt = weight.T

        def lin(ch):
            return Zero if _is_zero(ch) else ch @ wt

        val = self.val @ wt
        if bias is not None:
            val = val + bias
        return Jet(val, {c: lin(v) for c, v in self.d1.items()}, {c: lin(v) for c, v in self.d2.items()})

    def check_finite(self, where: str = "jet") -> "Jet":
        for name, ch in [("value", self.val), *self.d1.items(), *[(c + c, v) for c, v in self.d2.items()]]:
            if _is_zero(ch):
                continue
            t = torch.as_tensor(ch)
            if not torch.isfinite(t).all():
                bad = (~torch.isfinite(t)).nonzero()[0].tolist()
                raise NumericError(f"non-finite {name} channel in {where} at index {bad}")
        return self


def tanh(j):
    return j.tanh() if isinstance(j, Jet) else torch.tanh(j)


def sin(j):
    return j.sin() if isinstance(j, Jet) else torch.sin(torch.as_tensor(j))


def cos(j):
    return j.cos() if isinstance(j, Jet) else torch.cos(torch.as_tensor(j))


def exp(j):
    return j.exp() if isinstance(j, Jet) else torch.exp(torch.as_tensor(j))


def coordinate_jets(points, coords, request: DerivRequest, scale=None) -> dict[str, Jet]:
    """Scalar jets for each input coordinate (for closed-form field expressions)."""
    vec = Jet.seed(points, coords, request, scale)
    return {c: vec[..., k] for k, c in enumerate(coords)}


FieldJets = dict  # field name -> Jet with (N,) channels


def eval_with_input_derivs(net: Callable, points, needed, coords, scale=None) -> FieldJets:
    """Evaluate ``net`` on a seeded vector jet of ``points``.

    ``net`` maps an ``(N, D)`` :class:`Jet` to a dict of scalar jets (or a
    single jet, returned under the key ``"u"``).  ``needed`` is a
    :class:`DerivRequest` or derivative names such as ``("x", "xx")``.
    Non-finite inputs or outputs raise :class:`NumericError`.
    """
    req = needed if isinstance(needed, DerivRequest) else DerivRequest.parse(needed, coords)
    pts = torch.as_tensor(np.asarray(points, dtype=float) if not torch.is_tensor(points) else points, dtype=DTYPE)
    if not torch.isfinite(pts).all():
        bad = int((~torch.isfinite(pts)).any(dim=-1).nonzero()[0])
        raise NumericError(f"non-finite input point at index {bad}")
    out = net(Jet.seed(pts, coords, req, scale))
    if isinstance(out, Jet):
        out = {"u": out}
    for name, j in out.items():
        j.check_finite(f"output {name}")
    return out


def flat_parameters(tensors: Iterable[torch.Tensor]) -> np.ndarray:
    return torch.cat([t.detach().reshape(-1) for t in tensors]).numpy().copy()


def loss_param_gradient(loss: Callable[[], torch.Tensor], tensors: list[torch.Tensor]):
    """Value and gradient of a scalar closure with respect to ``tensors``.

    Returns ``(float, ndarray)`` with the gradient flattened in the order of
    ``tensors``.  Parameters the loss does not touch get zero gradient.
    """
    with torch.enable_grad():
        value = loss()
        if not torch.is_tensor(value):
            value = torch.as_tensor(value, dtype=DTYPE)
        if not torch.isfinite(value):
            raise NumericError(f"loss is not finite: {float(value.detach())}")
        if value.requires_grad:
            grads = torch.autograd.grad(value, tensors, allow_unused=True)
        else:
            grads = [None] * len(tensors)
    flat = [
        (torch.zeros_like(t) if g is None else g).detach().reshape(-1) for g, t in zip(grads, tensors)
    ]
    g = torch.cat(flat).numpy().copy() if flat else np.zeros(0)
    if not np.all(np.isfinite(g)):
        raise NumericError("gradient has non-finite entries")
    return float(value.detach()), g
