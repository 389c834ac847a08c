"""Boundary and initial data fields: constants, expressions, gridded tables.

Expression grammar
------------------
A field may be given as a string evaluated pointwise with numpy.  Allowed:

* numbers, ``pi``, ``e``
* coordinate names of the active mode (``x, z, t`` or ``r, theta, phi, t``),
  plus ``depth`` (= ``r_e - r``), ``lat`` and ``lon`` (radians) in 3D
* ``+ - * / **``, unary minus, parentheses
* ``sin cos tan exp log sqrt abs tanh``

Anything else (attribute access, subscripts, other names, keywords) is
rejected at parse time.

Gridded tables are dicts ``{"axes": {name: [...], ...}, "values": nested}``
interpolated multilinearly; queries outside the table raise.
"""

from __future__ import annotations

import ast
import math
import operator
from typing import Callable, Mapping

import numpy as np
from scipy.interpolate import RegularGridInterpolator

_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "tanh": np.tanh,
}
_CONSTS = {"pi": math.pi, "e": math.e}
_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}


class ExpressionError(ValueError):
    pass


def _check(node: ast.AST, names: set[str]) -> None:
    if isinstance(node, ast.Expression):
        return _check(node.body, names)
    if isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
            raise ExpressionError(f"unsupported literal {node.value!r}")
        return
    if isinstance(node, ast.Name):
        if node.id not in names and node.id not in _CONSTS:
            raise ExpressionError(f"unknown name {node.id!r}; allowed: {sorted(names | set(_CONSTS))}")
        return
    if isinstance(node, ast.BinOp):
        if type(node.op) not in _BINOPS:
            raise ExpressionError(f"unsupported operator {type(node.op).__name__}")
        _check(node.left, names)
        _check(node.right, names)
        return
    if isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, (ast.USub, ast.UAdd)):
            raise ExpressionError("only unary + and - are allowed")
        return _check(node.operand, names)
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
            raise ExpressionError(f"unsupported function in {ast.dump(node.func)}")
        if node.keywords or len(node.args) != 1:
            raise ExpressionError(f"{node.func.id} takes exactly one positional argument")
        return _check(node.args[0], names)
    raise ExpressionError(f"unsupported syntax: {type(node).__name__}")


def _eval(node: ast.AST, env: Mapping[str, np.ndarray]):
    if isinstance(node, ast.Expression):
        return _eval(node.body, env)
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        return env[node.id] if node.id in env else _CONSTS[node.id]
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, env), _eval(node.right, env))
    if isinstance(node, ast.UnaryOp):
        v = _eval(node.operand, env)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.Call):
        return _FUNCS[node.func.id](_eval(node.args[0], env))
    raise ExpressionError(type(node).__name__)  # unreachable after _check


def _env(points: np.ndarray, coords, r_e: float | None) -> dict[str, np.ndarray]:
    env = {c: points[:, k] for k, c in enumerate(coords)}
    if "r" in env and r_e is not None:
        env["depth"] = r_e - env["r"]
    if "theta" in env:
        env["lat"] = math.pi / 2 - env["theta"]
        env["lon"] = env["phi"]
    return env


class DataField:
    """A scalar field of the space-time coordinates used as boundary/initial data."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], source):
        self._fn = fn
        self.source = source

    def __call__(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        with np.errstate(all="ignore"):
            out = np.broadcast_to(np.asarray(self._fn(pts), dtype=float), (len(pts),)).copy()
        if not np.all(np.isfinite(out)):
            raise ExpressionError(f"data field {self.source!r} produced non-finite values")
        return out

    def __repr__(self):
        return f"DataField({self.source!r})"


def make_field(spec, coords, r_e: float | None = None) -> DataField:
    """Build a :class:`DataField` from a number, expression string or grid table."""
    coords = tuple(coords)
    if isinstance(spec, DataField):
        return spec
    if callable(spec):
        return DataField(spec, getattr(spec, "__name__", "callable"))
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        val = float(spec)
        return DataField(lambda pts: np.full(len(pts), val), spec)
    if isinstance(spec, str):
        names = set(coords)
        if "r" in names:
            names |= {"depth"}
        if "theta" in names:
            names |= {"lat", "lon"}
        try:
            tree = ast.parse(spec, mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse expression {spec!r}: {exc.msg}") from None
        _check(tree, names)
        return DataField(lambda pts: _eval(tree, _env(pts, coords, r_e)), spec)
    if isinstance(spec, Mapping) and "axes" in spec:
        return _grid_field(spec, coords, r_e)
    raise ExpressionError(f"cannot build a data field from {spec!r}")


def _grid_field(spec: Mapping, coords, r_e) -> DataField:
    axes = dict(spec["axes"])
    names = list(axes)
    grids = [np.asarray(axes[n], dtype=float) for n in names]
    values = np.asarray(spec["values"], dtype=float)
    if values.shape != tuple(len(g) for g in grids):
        raise ExpressionError(f"grid values shape {values.shape} does not match axes {[len(g) for g in grids]}")
    interp = RegularGridInterpolator(grids, values, method="linear", bounds_error=True)

    def fn(pts):
        env = _env(pts, coords, r_e)
        missing = [n for n in names if n not in env]
        if missing:
            raise ExpressionError(f"grid axes {missing} are not coordinates")
        q = np.stack([env[n] for n in names], axis=1)
        try:
            return interp(q)
        except ValueError as exc:
            raise ExpressionError(f"grid lookup outside table: {exc}") from None

    return DataField(fn, {"axes": names})
