"""Closed-circuit track geometry and Frenet/Cartesian conversion.

Conventions: lateral offset ``n`` is positive to the left of the direction of
travel, closed tracks run counter-clockwise, and the station ``s`` is the
uniform arc-length parameter of the resampled centerline.

The lateral frame at a station blends the normals of the two neighbouring
centerline vertices linearly. That keeps the frame continuous across vertices
and makes the Cartesian -> Frenet projection an exact quadratic solve, so the
round trip is accurate to floating point.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree
from shapely.geometry import LinearRing, LineString


class TrackError(ValueError):
    """Raised for malformed track input."""


class CorridorCollapsedError(TrackError):
    """Raised when the requested margin leaves no admissible corridor."""


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass(frozen=True)
class FrenetPose:
    s: float
    n: float
    mu: float = 0.0
    v: float = 0.0
    ambiguous: bool = False


@dataclass(frozen=True, eq=False)
class TrackModel:
    centerline: np.ndarray  # (N, 2)
    cum_station: np.ndarray
    curvature: np.ndarray
    width_left: np.ndarray
    width_right: np.ndarray
    closed: bool
    total_length: float
    normals: np.ndarray = field(repr=False)  # unit left normals per vertex
    _tree: cKDTree = field(repr=False)

    @property
    def spacing(self) -> float:
        return float(self.cum_station[1] - self.cum_station[0])

    @property
    def n_points(self) -> int:
        return len(self.cum_station)

    def closed_polyline(self) -> np.ndarray:
        """Centerline with the first point repeated at the end when closed."""
        if self.closed:
            return np.vstack([self.centerline, self.centerline[:1]])
        return self.centerline.copy()

    def wrap_s(self, s):
        if self.closed:
            return np.mod(s, self.total_length)
        return s

    # -- segment lookup ----------------------------------------------------

    def _segment(self, s: float) -> tuple[int, float]:
        ds = self.spacing
        n_seg = self.n_points if self.closed else self.n_points - 1
        s = float(self.wrap_s(s))
        u = s / ds
        i = int(math.floor(u))
        if self.closed:
            i = i % n_seg
            # floating wrap can land exactly on L
            t = u - math.floor(u)
        else:
            i = min(max(i, 0), n_seg - 1)
            t = u - i
        return i, t

    def _endpoints(self, i: int):
        j = (i + 1) % self.n_points
        return self.centerline[i], self.centerline[j], self.normals[i], self.normals[j]

    def curvature_at(self, s):
        """Linearly interpolated centerline curvature at station(s) ``s``."""
        s = np.asarray(s, dtype=float)
        if self.closed:
            xp = np.append(self.cum_station, self.total_length)
            fp = np.append(self.curvature, self.curvature[0])
            return np.interp(np.mod(s, self.total_length), xp, fp)
        return np.interp(s, self.cum_station, self.curvature)

    def widths_at(self, s) -> tuple[np.ndarray, np.ndarray]:
        s = np.asarray(s, dtype=float)
        if self.closed:
            xp = np.append(self.cum_station, self.total_length)
            wl = np.append(self.width_left, self.width_left[0])
            wr = np.append(self.width_right, self.width_right[0])
            ss = np.mod(s, self.total_length)
            return np.interp(ss, xp, wl), np.interp(ss, xp, wr)
        return (np.interp(s, self.cum_station, self.width_left),
                np.interp(s, self.cum_station, self.width_right))

    def heading_at(self, s) -> np.ndarray:
        """Tangent heading of the blended frame at station(s) ``s``."""
        _, nrm = self._frame_arrays(np.atleast_1d(np.asarray(s, dtype=float)))
        h = np.arctan2(-nrm[:, 0], nrm[:, 1])
        return h if np.ndim(s) else float(h[0])

    def _frame_arrays(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ds = self.spacing
        npts = self.n_points
        if self.closed:
            u = np.mod(s, self.total_length) / ds
            i = np.floor(u).astype(np.int64)
            t = u - i
            i = i % npts
            j = (i + 1) % npts
        else:
            u = s / ds
            i = np.clip(np.floor(u).astype(np.int64), 0, npts - 2)
            t = u - i
            j = i + 1
        p0 = self.centerline[i]
        p1 = self.centerline[j]
        c = p0 + t[:, None] * (p1 - p0)
        nb = (1.0 - t)[:, None] * self.normals[i] + t[:, None] * self.normals[j]
        nb /= np.linalg.norm(nb, axis=1)[:, None]
        return c, nb


# -- construction ---------------------------------------------------------


def _smooth_periodic(values: np.ndarray, window: int, closed: bool) -> np.ndarray:
    if window <= 1:
        return values.copy()
    half = window // 2
    if closed:
        padded = np.concatenate([values[-half:], values, values[:half]])
        kernel = np.ones(window) / window
        return np.convolve(padded, kernel, mode="valid")
    out = np.empty_like(values)
    n = len(values)
    for k in range(n):
        lo, hi = max(0, k - half), min(n, k + half + 1)
        out[k] = values[lo:hi].mean()
    return out


def build_track(centerline_points, widths, closed: bool = True,
                spacing: float = 1.0, smoothing_window: int = 5) -> TrackModel:
    """Resample a centerline to uniform station spacing and build a TrackModel.

    ``widths`` is either a ``(w_left, w_right)`` pair of arrays matching the
    input points or a pair of scalars. Clockwise closed input is reversed
    (and left/right widths swapped) so the result is always counter-clockwise.
    """
    pts = np.asarray(centerline_points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise TrackError("centerline must be an (N, 2) array")
    wl_in, wr_in = widths
    wl_in = np.broadcast_to(np.asarray(wl_in, dtype=float), (len(pts),)).copy()
    wr_in = np.broadcast_to(np.asarray(wr_in, dtype=float), (len(pts),)).copy()

    if closed and len(pts) > 1 and np.linalg.norm(pts[0] - pts[-1]) < 1e-6:
        pts, wl_in, wr_in = pts[:-1], wl_in[:-1], wr_in[:-1]
    if len(pts) < 4:
        raise TrackError("need at least 4 centerline points")
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if np.any(steps < 1e-9):
        raise TrackError("duplicate consecutive centerline points")
    if np.any(wl_in <= 0) or np.any(wr_in <= 0):
        raise TrackError("track widths must be positive")

    if closed:
        gap = float(np.linalg.norm(pts[0] - pts[-1]))
        if gap > 5.0 * float(steps.max()):
            raise TrackError(f"closed flag set but polyline is open (gap {gap:.1f} m)")
        if not LinearRing(pts).is_simple:
            raise TrackError("closed centerline self-intersects")
        x, y = pts[:, 0], pts[:, 1]
        signed_area = 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
        if signed_area < 0:
            pts = pts[::-1].copy()
            wl_in, wr_in = wr_in[::-1].copy(), wl_in[::-1].copy()
        loop = np.vstack([pts, pts[:1]])
        wl_loop = np.append(wl_in, wl_in[0])
        wr_loop = np.append(wr_in, wr_in[0])
        chord = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(loop, axis=0), axis=1))])
        spline = CubicSpline(chord, loop, bc_type="periodic")
    else:
        if not LineString(pts).is_simple:
            raise TrackError("centerline self-intersects")
        loop, wl_loop, wr_loop = pts, wl_in, wr_in
        chord = np.concatenate([[0.0], np.cumsum(steps)])
        spline = CubicSpline(chord, loop, bc_type="natural")

    # arc length of the spline by dense sampling
    dense_u = np.linspace(0.0, chord[-1], max(20 * int(chord[-1] / spacing), 2000) + 1)
    dense_p = spline(dense_u)
    dense_s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(dense_p, axis=0), axis=1))])
    length = float(dense_s[-1])

    if closed:
        n_pts = max(4, int(round(length / spacing)))
        ds = length / n_pts
        stations = np.arange(n_pts) * ds
    else:
        n_pts = max(4, int(round(length / spacing)) + 1)
        ds = length / (n_pts - 1)
        stations = np.arange(n_pts) * ds
    u_at = np.interp(stations, dense_s, dense_u)
    center = spline(u_at)
    w_left = np.interp(u_at, chord, wl_loop)
    w_right = np.interp(u_at, chord, wr_loop)

    if closed:
        seg = np.roll(center, -1, axis=0) - center
    else:
        seg = np.diff(center, axis=0)
    theta = np.arctan2(seg[:, 1], seg[:, 0])
    if closed:
        dtheta = np.array([wrap_angle(a) for a in theta - np.roll(theta, 1)])
        kappa_raw = dtheta / ds
        tangent = seg / np.linalg.norm(seg, axis=1)[:, None] + np.roll(
            seg / np.linalg.norm(seg, axis=1)[:, None], 1, axis=0)
    else:
        dtheta = np.array([wrap_angle(a) for a in np.diff(theta)])
        kappa_raw = np.concatenate([[dtheta[0]], dtheta, [dtheta[-1]]]) / ds
        unit = seg / np.linalg.norm(seg, axis=1)[:, None]
        tangent = np.vstack([unit[:1], unit[:-1] + unit[1:], unit[-1:]])
    kappa = _smooth_periodic(kappa_raw, smoothing_window, closed)
    tangent /= np.linalg.norm(tangent, axis=1)[:, None]
    normals = np.column_stack([-tangent[:, 1], tangent[:, 0]])

    total = float(n_pts * ds) if closed else float((n_pts - 1) * ds)
    return TrackModel(
        centerline=center,
        cum_station=stations,
        curvature=kappa,
        width_left=w_left,
        width_right=w_right,
        closed=closed,
        total_length=total,
        normals=normals,
        _tree=cKDTree(center),
    )


def load_track(path) -> TrackModel:
    """Read a track JSON file with ``x_m``, ``y_m``, ``w_left_m``, ``w_right_m``, ``closed``."""
    with open(path) as f:
        doc = json.load(f)
    try:
        pts = np.column_stack([doc["x_m"], doc["y_m"]])
        widths = (doc["w_left_m"], doc["w_right_m"])
    except KeyError as exc:
        raise TrackError(f"track file {path} missing key {exc}") from None
    return build_track(pts, widths, closed=bool(doc.get("closed", True)),
                       spacing=float(doc.get("spacing_m", 1.0)))


def save_track(path, x, y, w_left, w_right, closed=True, **extra) -> None:
    doc = {"x_m": list(map(float, x)), "y_m": list(map(float, y)),
           "w_left_m": list(map(float, w_left)), "w_right_m": list(map(float, w_right)),
           "closed": bool(closed)}
    doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1))


# -- conversions ----------------------------------------------------------


def _solve_segment(track: TrackModel, i: int, px: float, py: float, clamp: bool):
    a, b, na, nb = track._endpoints(i)
    dx, dy = b[0] - a[0], b[1] - a[1]
    wx, wy = px - a[0], py - a[1]
    ex, ey = nb[0] - na[0], nb[1] - na[1]
    # cross(w - t d, na + t e) = 0
    c0 = wx * na[1] - wy * na[0]
    c1 = (wx * ey - wy * ex) - (dx * na[1] - dy * na[0])
    c2 = -(dx * ey - dy * ex)
    roots = []
    if abs(c2) < 1e-14 * max(1.0, abs(c1)):
        if abs(c1) > 0:
            roots.append(-c0 / c1)
    else:
        disc = c1 * c1 - 4.0 * c2 * c0
        if disc >= 0:
            sq = math.sqrt(disc)
            # numerically stable pair
            q = -0.5 * (c1 + math.copysign(sq, c1))
            if q != 0:
                roots.append(q / c2)
                roots.append(c0 / q)
    out = []
    for t in roots:
        if clamp and not (-1e-9 <= t <= 1.0 + 1e-9):
            continue
        if clamp:
            t = min(max(t, 0.0), 1.0)
        cx, cy = a[0] + t * dx, a[1] + t * dy
        nx, ny = na[0] + t * ex, na[1] + t * ey
        norm = math.hypot(nx, ny)
        nx, ny = nx / norm, ny / norm
        n = (px - cx) * nx + (py - cy) * ny
        resid = abs((px - cx) * ny - (py - cy) * nx)
        if resid > 1e-6 + 1e-9 * abs(n):
            continue
        out.append((t, n, nx, ny))
    return out


def cart_to_frenet(track: TrackModel, point, heading: float = 0.0, speed: float = 0.0) -> FrenetPose:
    """Project a Cartesian pose onto the track.

    Among the local candidate segments, the foot point with the smallest
    ``|n|`` wins; exact ties go to the smaller station and set ``ambiguous``.
    """
    px, py = float(point[0]), float(point[1])
    npts = track.n_points
    n_seg = npts if track.closed else npts - 1
    _, k = track._tree.query((px, py))
    ds = track.spacing
    best = None
    for reach in (3, 12, n_seg):
        cands = []
        for off in range(-reach, reach):
            i = int(k) + off
            if track.closed:
                i %= n_seg
            elif i < 0 or i >= n_seg:
                continue
            edge = not track.closed and (i == 0 or i == n_seg - 1)
            for t, n, nx, ny in _solve_segment(track, i, px, py, clamp=not edge):
                if edge and ((i == 0 and t > 1.0 + 1e-9) or (i == n_seg - 1 and t < -1e-9)):
                    continue
                s = (i + t) * ds
                if track.closed:
                    s %= track.total_length
                cands.append((abs(n), s, n, nx, ny))
        if cands:
            cands.sort(key=lambda c: (c[0], c[1]))
            best = cands[0]
            ambiguous = any(abs(c[0] - best[0]) < 1e-9 and abs(c[1] - best[1]) > 1e-6 for c in cands[1:])
            break
    if best is None:
        raise TrackError(f"point ({px}, {py}) cannot be projected onto the track")
    _, s, n, nx, ny = best
    track_heading = math.atan2(-nx, ny)
    return FrenetPose(s=float(s), n=float(n), mu=wrap_angle(heading - track_heading), v=float(speed),
                      ambiguous=ambiguous)


def frenet_to_cart(track: TrackModel, pose) -> tuple[np.ndarray, float]:
    """Inverse of :func:`cart_to_frenet`: returns ``(point, heading)``."""
    s, n, mu = pose.s, pose.n, getattr(pose, "mu", 0.0)
    i, t = track._segment(s)
    a, b, na, nb = track._endpoints(i)
    c = a + t * (b - a)
    nv = (1.0 - t) * na + t * nb
    nv = nv / math.hypot(nv[0], nv[1])
    heading = math.atan2(-nv[0], nv[1])
    return c + n * nv, wrap_angle(heading + mu)


def frenet_to_cart_array(track: TrackModel, s, n) -> np.ndarray:
    """Vectorised position-only conversion; returns an ``(M, 2)`` array."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    n = np.broadcast_to(np.asarray(n, dtype=float), s.shape)
    c, nb = track._frame_arrays(s)
    return c + n[:, None] * nb


def corridor_at(track: TrackModel, s: float, margin: float) -> tuple[float, float]:
    """Admissible lateral band ``(n_min, n_max)`` shrunk by ``margin`` on both sides."""
    wl, wr = track.widths_at(s)
    wl, wr = float(wl), float(wr)
    if margin >= wl or margin >= wr:
        raise CorridorCollapsedError(
            f"margin {margin:.2f} m leaves no corridor (widths {wr:.2f}/{wl:.2f} m)")
    return -wr + margin, wl - margin


def station_distance(track: TrackModel, s_from: float, s_to: float) -> float:
    """Forward distance from ``s_from`` to ``s_to`` along a closed track."""
    if track.closed:
        return float((s_to - s_from) % track.total_length)
    return float(s_to - s_from)


def make_oval(straight: float = 900.0, chute: float = 200.0, radius: float | None = None,
              total: float = 4000.0, step: float = 5.0):
    """Stylized four-turn oval: two long straights, two short chutes, quarter turns.

    Returns ``(x, y)`` arrays, counter-clockwise, starting at the beginning of
    the front straight heading +x.
    """
    if radius is None:
        radius = (total - 2 * straight - 2 * chute) / (2 * math.pi)
    pts = []

    def line(p0, p1):
        n = max(1, int(round(math.dist(p0, p1) / step)))
        for k in range(n):
            pts.append((p0[0] + (p1[0] - p0[0]) * k / n, p0[1] + (p1[1] - p0[1]) * k / n))

    def arc(cx, cy, a0):
        n = max(2, int(round(0.5 * math.pi * radius / step)))
        for k in range(n):
            a = a0 + 0.5 * math.pi * k / n
            pts.append((cx + radius * math.cos(a), cy + radius * math.sin(a)))

    r = radius
    line((0.0, 0.0), (straight, 0.0))
    arc(straight, r, -0.5 * math.pi)
    line((straight + r, r), (straight + r, r + chute))
    arc(straight, r + chute, 0.0)
    line((straight, 2 * r + chute), (0.0, 2 * r + chute))
    arc(0.0, r + chute, 0.5 * math.pi)
    line((-r, r + chute), (-r, r))
    arc(0.0, r, math.pi)
    xy = np.array(pts)
    return xy[:, 0], xy[:, 1]


def project_points(track: TrackModel, pts, window: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection of many points; returns ``(s, n)`` arrays.

    Searches ``window`` segments either side of each point's nearest vertex.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    npts = track.n_points
    n_seg = npts if track.closed else npts - 1
    _, k = track._tree.query(pts)
    offs = np.arange(-window, window)
    idx = k[:, None] + offs[None, :]
    if track.closed:
        idx %= n_seg
        valid_idx = np.ones(idx.shape, dtype=bool)
    else:
        valid_idx = (idx >= 0) & (idx < n_seg)
        idx = np.clip(idx, 0, n_seg - 1)
    jdx = (idx + 1) % npts
    a = track.centerline[idx]
    d = track.centerline[jdx] - a
    na = track.normals[idx]
    e = track.normals[jdx] - na
    w = pts[:, None, :] - a

    def cross(u, v):
        return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]

    c0 = cross(w, na)
    c1 = cross(w, e) - cross(d, na)
    c2 = -cross(d, e)
    best_abs = np.full(len(pts), np.inf)
    best_s = np.full(len(pts), np.nan)
    best_n = np.full(len(pts), np.nan)
    lin = np.abs(c2) < 1e-14 * np.maximum(1.0, np.abs(c1))
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = c1 * c1 - 4.0 * c2 * c0
        sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
        q = -0.5 * (c1 + np.copysign(sq, c1))
        r1 = np.where(lin, -c0 / c1, q / c2)
        r2 = np.where(lin, np.nan, c0 / q)
    first_open = (~track.closed) & (idx == 0)
    last_open = (~track.closed) & (idx == n_seg - 1)
    for t in (r1, r2):
        ok = valid_idx & np.isfinite(t)
        lo = np.where(first_open, -np.inf, -1e-9)
        hi = np.where(last_open, np.inf, 1.0 + 1e-9)
        ok &= (t >= lo) & (t <= hi)
        tc = np.where(first_open | last_open, t, np.clip(t, 0.0, 1.0))
        c = a + tc[..., None] * d
        nv = na + tc[..., None] * e
        nv = nv / np.linalg.norm(nv, axis=-1)[..., None]
        nn = np.sum((pts[:, None, :] - c) * nv, axis=-1)
        ss = (idx + tc) * track.spacing
        if track.closed:
            ss = np.mod(ss, track.total_length)
        score = np.where(ok, np.abs(nn), np.inf)
        j = np.argmin(score, axis=1)
        rows = np.arange(len(pts))
        cand = score[rows, j]
        better = cand < best_abs
        best_abs = np.where(better, cand, best_abs)
        best_s = np.where(better, ss[rows, j], best_s)
        best_n = np.where(better, nn[rows, j], best_n)
    if np.any(~np.isfinite(best_abs)):
        bad = np.flatnonzero(~np.isfinite(best_abs))
        for b in bad:
            f = cart_to_frenet(track, pts[b])
            best_s[b], best_n[b] = f.s, f.n
    return best_s, best_n


class Projector:
    """Incremental scalar projection that reuses the previous station as a hint."""

    def __init__(self, track: TrackModel):
        self.track = track
        self._hint: int | None = None

    def __call__(self, x: float, y: float, heading: float = 0.0, speed: float = 0.0) -> FrenetPose:
        tr = self.track
        if self._hint is not None:
            n_seg = tr.n_points if tr.closed else tr.n_points - 1
            best = None
            for off in (0, 1, -1, 2, -2):
                i = self._hint + off
                if tr.closed:
                    i %= n_seg
                elif i < 1 or i >= n_seg - 1:
                    continue
                for t, n, nx, ny in _solve_segment(tr, i, x, y, clamp=True):
                    if best is None or abs(n) < abs(best[1]) - 1e-12:
                        best = (i, n, t, nx, ny)
                if best is not None and 1e-9 < best[2] < 1 - 1e-9:
                    break
            if best is not None:
                i, n, t, nx, ny = best
                self._hint = i
                s = (i + t) * tr.spacing
                if tr.closed:
                    s %= tr.total_length
                return FrenetPose(float(s), float(n),
                                  wrap_angle(heading - math.atan2(-nx, ny)), speed)
        f = cart_to_frenet(tr, (x, y), heading, speed)
        self._hint = int(f.s / tr.spacing)
        return f
