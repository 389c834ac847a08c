"""CSV formats for observations and field grids.

All writers emit UTF-8, LF line endings, ``.`` decimals via ``repr`` and no
trailing whitespace, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import io
import math
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .oracle import ObservationSet

HEADER_2D = ("x", "z", "t", "var", "value")
HEADER_3D = ("depth_m", "lat_deg", "lon_deg", "time_iso8601", "var", "value")
VARS_2D = ("tau", "v", "w", "p")
VARS_3D = ("tau", "sal", "w", "v_theta", "v_phi", "p")


class FormatError(ValueError):
    pass


class TimeAxis:
    """Conversion between ISO-8601 timestamps and model time ``t``."""

    def __init__(self, epoch: str = "2000-01-01T00:00:00+00:00", unit_seconds: float = 86400.0):
        self.epoch = parse_time(epoch)
        self.unit = float(unit_seconds)

    def to_t(self, stamp: str) -> float:
        return (parse_time(stamp) - self.epoch).total_seconds() / self.unit

    def to_iso(self, t: float) -> str:
        # microsecond resolution; round-trips to ~1e-11 days
        dt = self.epoch + timedelta(seconds=float(t) * self.unit)
        return dt.isoformat(timespec="microseconds").replace("+00:00", "Z")


def parse_time(stamp: str) -> datetime:
    s = stamp.strip()
    if s.endswith("Z"):
        s = s[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(s)
    except ValueError:
        raise FormatError(f"invalid ISO-8601 timestamp {stamp!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt


def _num(v: float) -> str:
    f = float(v)
    if not math.isfinite(f):
        raise FormatError(f"refusing to write non-finite value {f!r}")
    return repr(f)


def write_rows(path, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def to_geo(points: np.ndarray, r_e: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(r, theta, phi)`` -> depth in metres, latitude and longitude in degrees."""
    depth = r_e - points[:, 0]
    lat = 90.0 - np.degrees(points[:, 1])
    lon = np.degrees(points[:, 2])
    return depth, lat, lon


def from_geo(depth, lat, lon, r_e: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r = r_e - np.asarray(depth, dtype=float)
    theta = np.radians(90.0 - np.asarray(lat, dtype=float))
    phi = np.radians(np.mod(np.asarray(lon, dtype=float), 360.0))
    return r, theta, phi


def write_observations(path, obs: ObservationSet, mode: str, r_e: float = 6.371e6, time_axis: TimeAxis | None = None) -> None:
    if mode == "2d":
        rows = ([_num(p[0]), _num(p[1]), _num(p[2]), v, _num(val)] for p, v, val in zip(obs.points, obs.var, obs.value))
        write_rows(path, HEADER_2D, rows)
        return
    ta = time_axis or TimeAxis()
    depth, lat, lon = to_geo(obs.points, r_e)
    rows = (
        [_num(d), _num(la), _num(lo), ta.to_iso(p[3]), v, _num(val)]
        for d, la, lo, p, v, val in zip(depth, lat, lon, obs.points, obs.var, obs.value)
    )
    write_rows(path, HEADER_3D, rows)


def read_observations(path, mode: str, r_e: float = 6.371e6, time_axis: TimeAxis | None = None) -> ObservationSet:
    """Parse an observation CSV; the header must match the mode exactly."""
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = tuple(next(reader))
    except StopIteration:
        raise FormatError(f"{path}: empty file") from None
    want, allowed = (HEADER_2D, VARS_2D) if mode == "2d" else (HEADER_3D, VARS_3D)
    if header != want:
        raise FormatError(f"{path}: header {','.join(header)!r} != {','.join(want)!r}")
    ta = time_axis or TimeAxis()
    coords, var, val = [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(want):
            raise FormatError(f"{path}:{lineno}: expected {len(want)} fields, got {len(row)}")
        if row[-2] not in allowed:
            raise FormatError(f"{path}:{lineno}: unknown variable {row[-2]!r}")
        try:
            if mode == "2d":
                coords.append([float(row[0]), float(row[1]), float(row[2])])
            else:
                coords.append([float(row[0]), float(row[1]), float(row[2]), ta.to_t(row[3])])
            v = float(row[-1])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        if not math.isfinite(v) or not all(math.isfinite(c) for c in coords[-1]):
            raise FormatError(f"{path}:{lineno}: non-finite number")
        var.append(row[-2])
        val.append(v)
    if not val:
        raise FormatError(f"{path}: no observation rows")
    pts = np.asarray(coords, dtype=float)
    if mode == "3d":
        r, th, ph = from_geo(pts[:, 0], pts[:, 1], pts[:, 2], r_e)
        pts = np.column_stack([r, th, ph, pts[:, 3]])
        cnames = ("r", "theta", "phi", "t")
    else:
        cnames = ("x", "z", "t")
    return ObservationSet(cnames, pts, np.array(var, dtype=object), np.array(val))
