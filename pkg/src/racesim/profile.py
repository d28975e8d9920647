"""Friction-limited point-mass velocity profile.

Each segment between two stations is checked conservatively: the
longitudinal acceleration on the segment is constant and the lateral
acceleration is bounded by the larger end speed times the larger end
curvature. Any point on a segment (speed squared and curvature both
interpolated linearly) therefore stays inside the friction circle.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .dynamics import PointMassLimits


@njit(cache=True)
def _seg_root(w, kabs, ds, a):
    """Largest u = v_hi^2 with (u - w) <= 2 ds sqrt(a^2 - (u k)^2)."""
    if kabs <= 0.0:
        return w + 2.0 * ds * a
    q = 1.0 + 4.0 * ds * ds * kabs * kabs
    disc = w * w - q * (w * w - 4.0 * ds * ds * a * a)
    if disc < 0.0:
        return -1.0
    return (w + math.sqrt(disc)) / q


@njit(cache=True)
def _profile(kappa, ds, a_max, a_drive, v_max, v_start, v_end_cap, v_cap):
    n = kappa.shape[0]
    cap2 = np.empty(n)
    for i in range(n):
        c = v_max * v_max
        k = abs(kappa[i])
        if k > 0.0:
            c = min(c, a_max / k)
        vc = v_cap[i]
        c = min(c, vc * vc)
        cap2[i] = c
    cap2[n - 1] = min(cap2[n - 1], v_end_cap * v_end_cap)

    bw = np.empty(n)
    bw[n - 1] = cap2[n - 1]
    for i in range(n - 2, -1, -1):
        k = max(abs(kappa[i]), abs(kappa[i + 1]))
        u = _seg_root(bw[i + 1], k, ds, a_max)
        if u < 0.0:
            u = cap2[i]
        bw[i] = min(cap2[i], u)

    out = np.empty(n)
    w = min(v_start * v_start, bw[0])
    out[0] = w
    for i in range(n - 1):
        k = max(abs(kappa[i]), abs(kappa[i + 1]))
        u = _seg_root(w, k, ds, a_max)
        if u < 0.0:
            u = w
        u = min(u, w + 2.0 * ds * a_drive, bw[i + 1])
        out[i + 1] = u
        w = u
    for i in range(n):
        out[i] = math.sqrt(max(out[i], 0.0))
    return out


def velocity_profile(curvature, ds: float, limits: PointMassLimits, v_start: float,
                     v_end_cap: float | None = None, v_cap=None) -> np.ndarray:
    """Maximum speed per station under the friction circle.

    Lateral cap ``sqrt(a_max/|k|)``, then a backward braking pass, then a
    forward acceleration pass limited by the traction cap. ``v_cap`` is an
    optional per-station ceiling; feeding a profile back in as its own cap
    returns it unchanged.
    """
    kappa = np.ascontiguousarray(curvature, dtype=float)
    if kappa.ndim != 1 or len(kappa) < 2:
        raise ValueError("need at least two stations")
    if not np.all(np.isfinite(kappa)):
        raise ValueError("curvature must be finite")
    cap = (np.full(len(kappa), np.inf) if v_cap is None
           else np.ascontiguousarray(np.broadcast_to(v_cap, kappa.shape), dtype=float))
    vend = math.inf if v_end_cap is None else float(v_end_cap)
    return _profile(kappa, float(ds), limits.a_max, limits.a_lon_drive_max, limits.v_max,
                    float(v_start), vend, cap)


def segment_accelerations(v: np.ndarray, ds: float) -> np.ndarray:
    """Constant longitudinal acceleration on each segment; last entry repeats 0."""
    a = np.empty_like(v)
    a[:-1] = (v[1:] ** 2 - v[:-1] ** 2) / (2.0 * ds)
    a[-1] = 0.0
    return a


def travel_times(v: np.ndarray, ds: float) -> np.ndarray:
    """Arrival time at each station; ``inf`` after a station where the profile stops."""
    t = np.zeros_like(v)
    for i in range(1, len(v)):
        vs = v[i - 1] + v[i]
        t[i] = t[i - 1] + (2.0 * ds / vs if vs > 0 else math.inf)
    return t
