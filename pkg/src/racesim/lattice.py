"""Spatio-temporal lattice: construction and exact dynamic-programming search.

Nodes carry (station, lateral offset, speed). Time is not a node axis: it is
propagated from the start node along the best path into each node, and the
collision test of an edge uses that arrival time. With static obstacles the
edge set is time independent and the single sweep is exactly optimal.

Edges are cubic lateral transitions with zero lateral slope at both nodes and
constant longitudinal acceleration in between.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .dynamics import PointMassLimits
from .prediction import PredictedTrajectory
from .profile import velocity_profile
from .track import CorridorCollapsedError, TrackModel, corridor_at


class PlanningError(RuntimeError):
    """No admissible start node or no path to the final layer."""


@dataclass(frozen=True)
class PlannerConfig:
    layer_spacing: float = 20.0   # minimum station spacing between layers
    layer_time: float = 1.2       # layers are at least v_ref * layer_time apart
    horizon: float = 400.0
    lateral_step: float = 1.5
    speed_step: float = 5.0
    w_n: float = 0.0002
    w_dn: float = 0.05
    w_dv: float = 0.01
    half_width: float = 1.0
    half_length: float = 2.5
    safety_margin: float = 0.5
    collision_step: float = 4.0
    edge_bins: int = 8
    anchor_n: float = 1.0         # replan from the previous plan within these deviations
    anchor_v: float = 3.0
    sample_dt: float = 0.05
    dense_step: float = 1.0
    period: float = 0.1
    computation_delay: float = 0.02
    friction_usage: float = 0.9
    a_drive: float = 6.0          # traction-limited acceleration before friction scaling
    envelope_backoff: float = 0.97
    lattice_margin: float = 0.3   # extra clearance in the coarse edge check
    turn_curvature: float = 1e-3  # layers are placed where |k| first exceeds this
    # edges may exceed the friction budget by this fraction; the reconstructed
    # trajectory is re-profiled against the exact budget
    edge_slack: float = 0.05
    # arrival-time labels kept per node when opponents move; the search is
    # exact unless this cap is hit
    max_labels: int = 64

    @property
    def corridor_margin(self) -> float:
        return self.half_width + self.safety_margin


@dataclass(eq=False)
class ObstacleSet:
    """Predictions packed into arrays relative to the plan origin."""

    sigma: np.ndarray      # (k, m) station relative to the plan start station
    n: np.ndarray
    v_last: np.ndarray
    dt: float
    t_offset: float        # prediction time at plan time zero
    half_length: np.ndarray
    half_width: np.ndarray
    infl_lon: np.ndarray
    infl_lat: np.ndarray
    growth: np.ndarray
    t_cap: np.ndarray
    static: bool
    ids: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return self.sigma.shape[0]

    @classmethod
    def empty(cls) -> "ObstacleSet":
        z = np.zeros(0)
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), z, 0.1, 0.0, z, z, z, z, z, z, True, [])

    @classmethod
    def from_predictions(cls, preds: list[PredictedTrajectory], s_origin: float,
                         track: TrackModel, t_offset: float = 0.0,
                         margin: float = 0.0) -> "ObstacleSet":
        """``margin`` widens every inflation (lattice edges are checked coarsely)."""
        if not preds:
            return cls.empty()
        m = min(len(p.t) for p in preds)
        L = track.total_length
        sig = np.empty((len(preds), m))
        for k, p in enumerate(preds):
            rel = p.s[:m] - s_origin
            if track.closed:
                rel = rel - L * np.round(rel[0] / L) if abs(rel[0]) > 0.5 * L else rel
            sig[k] = rel
        static = all(np.ptp(p.s[:m]) == 0 and np.ptp(p.n[:m]) == 0 and p.inflation_growth == 0
                     for p in preds)
        return cls(
            sigma=sig,
            n=np.array([p.n[:m] for p in preds]),
            v_last=np.array([float(p.v[m - 1]) for p in preds]),
            dt=preds[0].dt or 0.1,
            t_offset=float(t_offset),
            half_length=np.array([p.half_length for p in preds]),
            half_width=np.array([p.half_width for p in preds]),
            infl_lon=np.array([p.inflation_lon + margin for p in preds]),
            infl_lat=np.array([p.inflation_lat + margin for p in preds]),
            growth=np.array([p.inflation_growth for p in preds]),
            t_cap=np.array([p.horizon for p in preds]),
            static=static,
            ids=[p.opponent_id for p in preds],
        )


# -- numba kernels ---------------------------------------------------------


@njit(cache=True, inline="always")
def _opp_at(sig, n, k, v_last, dt, t):
    m = sig.shape[1]
    if t <= 0.0:
        return sig[k, 0], n[k, 0]
    u = t / dt
    i = int(u)
    if i >= m - 1:
        return sig[k, m - 1] + v_last * (t - (m - 1) * dt), n[k, m - 1]
    f = u - i
    return sig[k, i] + f * (sig[k, i + 1] - sig[k, i]), n[k, i] + f * (n[k, i + 1] - n[k, i])


@njit(cache=True, inline="always")
def _point_hits(sigma, nn, t_pred, o_sig, o_n, o_vl, dt, o_hl, o_hw, o_il, o_it, o_g, o_tc,
                ego_hl, ego_hw):
    for k in range(o_sig.shape[0]):
        so, no = _opp_at(o_sig, o_n, k, o_vl[k], dt, t_pred)
        g = o_g[k] * min(max(t_pred, 0.0), o_tc[k])
        if (abs(sigma - so) < ego_hl + o_hl[k] + o_il[k] + g
                and abs(nn - no) < ego_hw + o_hw[k] + o_it[k] + g):
            return True
    return False


@njit(cache=True, inline="always")
def _edge_collides(sa, na, va, sb, nb, vb, t_entry, t_offset, o_sig, o_n, o_vl, dt, o_hl, o_hw,
                   o_il, o_it, o_g, o_tc, ego_hl, ego_hw, step):
    nopp = o_sig.shape[0]
    if nopp == 0:
        return False
    span = sb - sa
    t_edge = 2.0 * span / (va + vb)
    # quick reject on the station band swept by each opponent during the edge
    any_close = False
    n_lo, n_hi = min(na, nb), max(na, nb)
    for k in range(nopp):
        s1, n1 = _opp_at(o_sig, o_n, k, o_vl[k], dt, t_offset + t_entry)
        s2, n2 = _opp_at(o_sig, o_n, k, o_vl[k], dt, t_offset + t_entry + t_edge)
        g = o_g[k] * o_tc[k]
        reach = ego_hl + o_hl[k] + o_il[k] + g
        if max(s1, s2) + reach < sa or min(s1, s2) - reach > sb:
            continue
        # lateral band: samples between the two ends may swing further
        i1 = min(max(int((t_offset + t_entry) / dt), 0), o_n.shape[1] - 1)
        i2 = min(max(int((t_offset + t_entry + t_edge) / dt) + 1, 0), o_n.shape[1] - 1)
        lo_o = min(n1, n2)
        hi_o = max(n1, n2)
        for i in range(i1, i2 + 1):
            lo_o = min(lo_o, o_n[k, i])
            hi_o = max(hi_o, o_n[k, i])
        wreach = ego_hw + o_hw[k] + o_it[k] + g
        if hi_o + wreach < n_lo or lo_o - wreach > n_hi:
            continue
        any_close = True
        break
    if not any_close:
        return False
    m = max(2, int(math.ceil(span / step)))
    for j in range(m + 1):
        u = j / m
        sig = sa + u * span
        nn = na + (nb - na) * u * u * (3.0 - 2.0 * u)
        v2 = va * va + u * (vb * vb - va * va)
        vu = math.sqrt(max(v2, 0.0))
        tau = 2.0 * u * span / (va + vu) if va + vu > 0 else 0.0
        if _point_hits(sig, nn, t_offset + t_entry + tau, o_sig, o_n, o_vl, dt, o_hl, o_hw,
                       o_il, o_it, o_g, o_tc, ego_hl, ego_hw):
            return True
    return False


@njit(cache=True)
def _dp(layer_ptr, node_sig, node_n, node_v, edge_ptr, edge_dst, edge_cost, edge_time,
        t_offset, o_sig, o_n, o_vl, dt, o_hl, o_hw, o_il, o_it, o_g, o_tc, ego_hl, ego_hw, step):
    nn = node_sig.shape[0]
    cost = np.full(nn, np.inf)
    tarr = np.full(nn, np.inf)
    pred = np.full(nn, -1, dtype=np.int64)
    cost[0] = 0.0
    tarr[0] = 0.0
    n_layers = layer_ptr.shape[0] - 1
    for layer in range(n_layers - 1):
        for u in range(layer_ptr[layer], layer_ptr[layer + 1]):
            cu = cost[u]
            if cu == np.inf:
                continue
            for e in range(edge_ptr[u], edge_ptr[u + 1]):
                w = edge_dst[e]
                c = cu + edge_cost[e]
                cw = cost[w]
                if c > cw:
                    continue
                if c == cw:
                    p = pred[w]
                    # tie-break: smaller |n| of the predecessor, then the left one
                    an, ap = abs(node_n[u]), abs(node_n[p])
                    if an > ap or (an == ap and node_n[u] <= node_n[p]):
                        continue
                if _edge_collides(node_sig[u], node_n[u], node_v[u], node_sig[w], node_n[w],
                                  node_v[w], tarr[u], t_offset, o_sig, o_n, o_vl, dt, o_hl,
                                  o_hw, o_il, o_it, o_g, o_tc, ego_hl, ego_hw, step):
                    continue
                cost[w] = c
                tarr[w] = tarr[u] + edge_time[e]
                pred[w] = u
    return cost, tarr, pred


@njit(cache=True)
def _insert_label(w, c, t, u, lu, node_n, lc, lt, lpn, lpl, cnt):
    """Add a label to node ``w``; returns 1 if a label had to be discarded."""
    K = lc.shape[1]
    worst = -1
    for j in range(cnt[w]):
        if lt[w, j] == t:
            if c > lc[w, j]:
                return 0
            if c == lc[w, j]:
                p = lpn[w, j]
                an, ap = abs(node_n[u]), abs(node_n[p])
                if an > ap or (an == ap and node_n[u] <= node_n[p]):
                    return 0
            lc[w, j] = c
            lpn[w, j] = u
            lpl[w, j] = lu
            return 0
        if worst < 0 or lc[w, j] > lc[w, worst]:
            worst = j
    if cnt[w] < K:
        j = cnt[w]
        cnt[w] += 1
    elif c < lc[w, worst]:
        j = worst
    else:
        return 1
    lc[w, j] = c
    lt[w, j] = t
    lpn[w, j] = u
    lpl[w, j] = lu
    return 1 if cnt[w] == K and j == worst else 0


@njit(cache=True)
def _dp_labels(layer_ptr, node_sig, node_n, node_v, edge_ptr, edge_dst, edge_cost, edge_time,
               t_offset, o_sig, o_n, o_vl, dt, o_hl, o_hw, o_il, o_it, o_g, o_tc, ego_hl, ego_hw,
               step, K, h, bound):
    """Layer sweep keeping one label per distinct arrival time at each node.

    Edge feasibility depends on the arrival time when opponents move, so the
    cheapest arrival at a node does not always extend to the cheapest
    completion. Two prefixes with the same arrival time face identical
    futures, so only the cheaper one needs to be kept. Labels whose cost plus
    the collision-free cost-to-go ``h`` exceeds ``bound`` (the cost of a known
    feasible path) cannot be optimal and are not stored.
    """
    nn = node_sig.shape[0]
    lc = np.full((nn, K), np.inf)
    lt = np.full((nn, K), np.inf)
    lpn = np.full((nn, K), -1, dtype=np.int64)
    lpl = np.full((nn, K), -1, dtype=np.int64)
    cnt = np.zeros(nn, dtype=np.int64)
    lc[0, 0] = 0.0
    lt[0, 0] = 0.0
    cnt[0] = 1
    dropped = 0
    n_layers = layer_ptr.shape[0] - 1
    for layer in range(n_layers - 1):
        for u in range(layer_ptr[layer], layer_ptr[layer + 1]):
            for lu in range(cnt[u]):
                cu = lc[u, lu]
                tu = lt[u, lu]
                for e in range(edge_ptr[u], edge_ptr[u + 1]):
                    w = edge_dst[e]
                    if cu + edge_cost[e] + h[w] > bound:
                        continue
                    if _edge_collides(node_sig[u], node_n[u], node_v[u], node_sig[w], node_n[w],
                                      node_v[w], tu, t_offset, o_sig, o_n, o_vl, dt, o_hl, o_hw,
                                      o_il, o_it, o_g, o_tc, ego_hl, ego_hw, step):
                        continue
                    c = cu + edge_cost[e]
                    dropped += _insert_label(w, c, tu + edge_time[e], u, lu,
                                             node_n, lc, lt, lpn, lpl, cnt)
    return lc, lt, lpn, lpl, cnt, dropped


@njit(cache=True)
def _cost_to_go(layer_ptr, edge_ptr, edge_dst, edge_cost):
    """Cheapest completion from every node with opponents ignored."""
    nn = edge_ptr.shape[0] - 1
    h = np.full(nn, np.inf)
    n_layers = layer_ptr.shape[0] - 1
    for w in range(layer_ptr[n_layers - 1], layer_ptr[n_layers]):
        h[w] = 0.0
    for layer in range(n_layers - 2, -1, -1):
        for u in range(layer_ptr[layer], layer_ptr[layer + 1]):
            for e in range(edge_ptr[u], edge_ptr[u + 1]):
                c = edge_cost[e] + h[edge_dst[e]]
                if c < h[u]:
                    h[u] = c
    return h


# -- graph -----------------------------------------------------------------


@dataclass(eq=False)
class LatticeGraph:
    s0: float
    layer_sigma: np.ndarray          # relative station of each layer, layer 0 = 0
    layer_ptr: np.ndarray            # node index range per layer
    node_sig: np.ndarray
    node_n: np.ndarray
    node_v: np.ndarray
    edge_ptr: np.ndarray             # CSR by source node
    edge_dst: np.ndarray
    edge_cost: np.ndarray
    edge_time: np.ndarray
    edge_kappa: np.ndarray           # peak path curvature used in the friction test
    edge_alon: np.ndarray
    obstacles: ObstacleSet
    config: PlannerConfig
    limits: PointMassLimits
    corridor: np.ndarray             # (layers, 2)

    @property
    def n_layers(self) -> int:
        return len(self.layer_ptr) - 1

    @property
    def n_nodes(self) -> int:
        return len(self.node_sig)

    @property
    def n_edges(self) -> int:
        return len(self.edge_dst)

    def layer_of(self, node: int) -> int:
        return int(np.searchsorted(self.layer_ptr, node, side="right") - 1)

    def edge_collides(self, src: int, dst: int, t_entry: float) -> bool:
        o, c = self.obstacles, self.config
        return bool(_edge_collides(
            self.node_sig[src], self.node_n[src], self.node_v[src], self.node_sig[dst],
            self.node_n[dst], self.node_v[dst], t_entry, o.t_offset, o.sigma, o.n, o.v_last, o.dt,
            o.half_length, o.half_width, o.infl_lon, o.infl_lat, o.growth, o.t_cap,
            c.half_length, c.half_width, c.collision_step))

    def out_edges(self, node: int) -> range:
        return range(int(self.edge_ptr[node]), int(self.edge_ptr[node + 1]))


def layer_stations(cfg: PlannerConfig, v0: float, horizon: float, limits: PointMassLimits,
                   spacing: float | None = None, n_layers: int | None = None,
                   track: TrackModel | None = None, s0: float = 0.0) -> np.ndarray:
    """Relative layer stations; gaps grow with the fastest reachable speed.

    With a track, a gap is cut short where the curvature rises into a turn so
    that braking can be finished on the straight before it.
    """
    sig = [0.0]
    while (len(sig) - 1 < n_layers) if n_layers is not None else sig[-1] < horizon - 1e-9:
        if spacing is not None:
            gap = spacing
        else:
            v_hi = min(limits.v_max, math.sqrt(v0 * v0 + 2.0 * limits.a_lon_drive_max * sig[-1]))
            gap = max(cfg.layer_spacing, v_hi * cfg.layer_time)
            if track is not None:
                gap = _cut_at_turn_entry(track, s0 + sig[-1], gap, cfg.layer_spacing, cfg.turn_curvature)
        sig.append(sig[-1] + gap)
    return np.array(sig)


def _cut_at_turn_entry(track: TrackModel, s: float, gap: float, min_gap: float,
                       k_turn: float) -> float:
    u = np.arange(0.0, gap + min_gap + 1e-9, 1.0)
    k = np.abs(track.curvature_at(s + u))
    if k[0] >= k_turn or k.max() < k_turn:
        return gap
    # back up to where the curvature ramp starts
    i = int(np.argmax(k >= k_turn))
    while i > 0 and k[i - 1] >= 0.25 * k_turn:
        i -= 1
    cut = float(u[i])
    return cut if 0.25 * min_gap <= cut < gap + min_gap else gap


def _speed_grid(cfg: PlannerConfig, v_lo: float, v_top: float) -> np.ndarray:
    grid = np.arange(0.0, v_top + 1e-9, cfg.speed_step)
    if v_top - grid[-1] > 1e-6:
        grid = np.append(grid, v_top)
    keep = grid >= v_lo - cfg.speed_step
    return grid[keep]


def _lateral_grid(cfg: PlannerConfig, n_min: float, n_max: float) -> np.ndarray:
    j_lo = math.ceil(n_min / cfg.lateral_step - 1e-9)
    j_hi = math.floor(n_max / cfg.lateral_step + 1e-9)
    return np.arange(j_lo, j_hi + 1) * cfg.lateral_step


def build_lattice(track: TrackModel, ego, horizon_length: float | None,
                  predictions: list[PredictedTrajectory] | ObstacleSet | None,
                  limits: PointMassLimits, config: PlannerConfig = PlannerConfig(),
                  t_offset: float = 0.0, n_layers: int | None = None,
                  lateral_offsets=None, speeds=None, spacing: float | None = None) -> LatticeGraph:
    """Build the layered graph ahead of ``ego`` (a FrenetPose).

    ``lateral_offsets``/``speeds``/``spacing``/``n_layers`` override the
    grid derived from the config (used for small test lattices).
    """
    cfg = config
    horizon = cfg.horizon if horizon_length is None else float(horizon_length)
    if track.closed and horizon > track.total_length:
        raise PlanningError("horizon longer than the track")
    s0, n0, v0 = float(ego.s), float(ego.n), max(float(ego.v), 0.0)
    try:
        c0 = corridor_at(track, s0, cfg.corridor_margin)
    except CorridorCollapsedError as exc:
        raise PlanningError(str(exc)) from None
    if not c0[0] - 1e-9 <= n0 <= c0[1] + 1e-9:
        raise PlanningError(f"start offset {n0:.2f} m outside corridor {c0}")

    sig_layers = layer_stations(cfg, v0, horizon, limits, spacing, n_layers, track, s0)
    K = len(sig_layers) - 1
    gaps = np.diff(sig_layers)

    # curvature envelope of each layer gap, max-pooled into sub-intervals
    nb_ = cfg.edge_bins
    u_edges = np.linspace(0.0, 1.0, nb_ + 1)
    kbin = np.empty((K, nb_))
    for k in range(K):
        uu = np.linspace(0.0, 1.0, max(4 * nb_, int(gaps[k])) + 1)
        kk = np.abs(track.curvature_at(s0 + sig_layers[k] + uu * gaps[k]))
        for j in range(nb_):
            m = (uu >= u_edges[j] - 1e-12) & (uu <= u_edges[j + 1] + 1e-12)
            kbin[k, j] = kk[m].max()

    # centreline speed envelope, long enough that the last layer can still
    # brake for whatever lies beyond the horizon
    env_step = cfg.dense_step
    reach = sig_layers[-1] + limits.v_max ** 2 / (2.0 * limits.a_max)
    env_s = np.arange(0.0, reach + env_step, env_step)
    if not track.closed:
        env_s = env_s[s0 + env_s <= track.total_length]
    envelope = velocity_profile(track.curvature_at(s0 + env_s), env_step, limits, limits.v_max)

    layer_n, layer_v, corr = [np.array([n0])], [np.array([v0])], [c0]
    for k in range(1, K + 1):
        s_abs = s0 + sig_layers[k]
        try:
            cmin, cmax = corridor_at(track, s_abs, cfg.corridor_margin)
        except CorridorCollapsedError as exc:
            raise PlanningError(str(exc)) from None
        corr.append((cmin, cmax))
        offs = (np.asarray(lateral_offsets, dtype=float) if lateral_offsets is not None
                else _lateral_grid(cfg, cmin, cmax))
        offs = offs[(offs >= cmin - 1e-9) & (offs <= cmax + 1e-9)]
        kn = float(np.max(np.abs(track.curvature_at(s_abs + np.linspace(-2.0, 2.0, 5)))))
        v_top = limits.v_max if kn <= 0 else min(limits.v_max, math.sqrt(limits.a_max / kn))
        # speeds reachable from the start under the point-mass limits
        v_reach = math.sqrt(v0 * v0 + 2.0 * limits.a_lon_drive_max * sig_layers[k])
        v_lo = math.sqrt(max(v0 * v0 - 2.0 * limits.a_max * sig_layers[k], 0.0))
        if speeds is not None:
            vs = np.asarray(speeds, dtype=float)
            vs = vs[vs <= v_top + 1e-9]
        else:
            v_env = float(np.interp(sig_layers[k], env_s, envelope))
            v_top = min(v_top, v_env)
            vs = _speed_grid(cfg, v_lo, v_top)
            # a slightly slower option keeps near-limit chains connected
            # when the coarse edge check is more conservative than the envelope
            vs = np.union1d(vs, [cfg.envelope_backoff * v_top, min(v_reach, v_top)])
            vs = vs[(vs <= v_reach + 1e-9) & (vs >= v_lo - cfg.speed_step)]
        nn_, vv_ = np.meshgrid(offs, vs, indexing="ij")
        layer_n.append(nn_.ravel())
        layer_v.append(vv_.ravel())

    layer_ptr = np.zeros(K + 2, dtype=np.int64)
    for k in range(K + 1):
        layer_ptr[k + 1] = layer_ptr[k] + len(layer_n[k])
    node_n = np.concatenate(layer_n)
    node_v = np.concatenate(layer_v)
    node_sig = np.concatenate([np.full(len(layer_n[k]), sig_layers[k]) for k in range(K + 1)])

    if isinstance(predictions, ObstacleSet):
        obs = predictions
    else:
        obs = ObstacleSet.from_predictions(list(predictions or []), s0, track, t_offset,
                                           cfg.lattice_margin)

    src_l, dst_l, cost_l, time_l, kap_l, alon_l = [], [], [], [], [], []
    a2 = (limits.a_max * (1.0 + cfg.edge_slack)) ** 2
    for k in range(K):
        ds = gaps[k]
        a_idx = np.arange(layer_ptr[k], layer_ptr[k + 1])
        b_idx = np.arange(layer_ptr[k + 1], layer_ptr[k + 2])
        na, va = node_n[a_idx][:, None], node_v[a_idx][:, None]
        nb, vb = node_n[b_idx][None, :], node_v[b_idx][None, :]
        dn = np.abs(nb - na)
        alon = (vb * vb - va * va) / (2.0 * ds)
        ok = (alon <= limits.a_lon_drive_max + 1e-12) & ((va + vb) > 0)
        # friction circle on every sub-interval: v^2 is linear in u and the
        # lateral-shape curvature |n''| is linear in u, so both peak at an end
        kap = np.zeros_like(alon)
        for j in range(nb_):
            u0, u1 = u_edges[j], u_edges[j + 1]
            v2 = np.maximum(va * va + u0 * (vb * vb - va * va), va * va + u1 * (vb * vb - va * va))
            kj = kbin[k, j] + dn * max(abs(6 - 12 * u0), abs(6 - 12 * u1)) / (ds * ds)
            alat = v2 * kj
            if k == 0:
                # the start speed is whatever the vehicle has; its first edge only
                # needs each axis within budget and the re-profile does the rest
                ok &= (alat * alat <= a2 * (1.0 + 1e-12)) & (alon * alon <= a2 * (1.0 + 1e-12))
            else:
                ok &= alon * alon + alat * alat <= a2 * (1.0 + 1e-12)
            kap = np.maximum(kap, kj)
        ttime = 2.0 * ds / np.where(ok, va + vb, 1.0)
        cost = (ttime + cfg.w_n * 0.5 * (np.abs(na) + np.abs(nb)) * ds
                + cfg.w_dn * dn + cfg.w_dv * np.abs(vb - va))
        ia, ib = np.nonzero(ok)
        src_l.append(a_idx[ia])
        dst_l.append(b_idx[ib])
        cost_l.append(cost[ia, ib])
        time_l.append(ttime[ia, ib])
        kap_l.append(kap[ia, ib])
        alon_l.append(alon[ia, ib])

    src = np.concatenate(src_l)
    dst = np.concatenate(dst_l)
    ecost = np.concatenate(cost_l)
    etime = np.concatenate(time_l)
    ekap = np.concatenate(kap_l)
    ealon = np.concatenate(alon_l)
    if obs.static and obs.count:
        keep = ~_static_blocked(src, dst, node_sig, node_n, node_v, obs.sigma, obs.n, obs.v_last,
                                obs.dt, obs.half_length, obs.half_width, obs.infl_lon,
                                obs.infl_lat, obs.growth, obs.t_cap, obs.t_offset,
                                cfg.half_length, cfg.half_width, cfg.collision_step)
        src, dst, ecost, etime, ekap, ealon = (a[keep] for a in (src, dst, ecost, etime, ekap, ealon))
    edge_ptr = np.zeros(len(node_n) + 1, dtype=np.int64)
    np.add.at(edge_ptr, src + 1, 1)
    edge_ptr = np.cumsum(edge_ptr)
    return LatticeGraph(s0, sig_layers, layer_ptr, node_sig, node_n, node_v, edge_ptr, dst,
                        ecost, etime, ekap, ealon, obs, cfg, limits, np.array(corr))


@njit(cache=True)
def _static_blocked(src, dst, node_sig, node_n, node_v, o_sig, o_n, o_vl, dt, o_hl, o_hw, o_il,
                    o_it, o_g, o_tc, t_offset, ego_hl, ego_hw, step):
    """Edges that hit a stationary obstacle.

    Stationary predictions carry no uncertainty growth, so the test does not
    depend on the arrival time and blocked edges can be dropped up front.
    """
    out = np.zeros(src.shape[0], dtype=np.bool_)
    for e in range(src.shape[0]):
        u, w = src[e], dst[e]
        out[e] = _edge_collides(node_sig[u], node_n[u], node_v[u], node_sig[w], node_n[w],
                                node_v[w], 0.0, t_offset, o_sig, o_n, o_vl, dt, o_hl, o_hw, o_il,
                                o_it, o_g, o_tc, ego_hl, ego_hw, step)
    return out


@dataclass
class LatticePath:
    nodes: list[int]
    cost: float
    times: list[float]
    exact: bool = True    # False when the label cap discarded candidates


def search_optimal(graph: LatticeGraph) -> LatticePath:
    """Forward sweep over the DAG; returns the cheapest path to the last layer.

    Without moving opponents a single label per node suffices. Otherwise
    labels are kept per arrival time (see :func:`_dp_labels`).
    """
    o, c = graph.obstacles, graph.config
    args = (graph.layer_ptr, graph.node_sig, graph.node_n, graph.node_v, graph.edge_ptr,
            graph.edge_dst, graph.edge_cost, graph.edge_time, o.t_offset, o.sigma, o.n, o.v_last,
            o.dt, o.half_length, o.half_width, o.infl_lon, o.infl_lat, o.growth, o.t_cap,
            c.half_length, c.half_width, c.collision_step)
    cost, tarr, pred = _dp(*args)
    if o.static or o.count == 0:
        lc, lt = cost[:, None], tarr[:, None]
        lpn, lpl = pred[:, None], np.where(pred >= 0, 0, -1)[:, None]
        cnt = np.ones(graph.n_nodes, dtype=np.int64)
        dropped = 0
    else:
        # the single-label sweep gives a feasible path whose cost bounds the search
        lo, hi = graph.layer_ptr[-2], graph.layer_ptr[-1]
        bound = float(cost[lo:hi].min()) if hi > lo else np.inf
        bound = bound + 1e-9 * max(1.0, abs(bound)) if np.isfinite(bound) else np.inf
        h = _cost_to_go(graph.layer_ptr, graph.edge_ptr, graph.edge_dst, graph.edge_cost)
        lc, lt, lpn, lpl, cnt, dropped = _dp_labels(*args, max(1, int(c.max_labels)), h, bound)

    lo, hi = graph.layer_ptr[-2], graph.layer_ptr[-1]
    best = None
    for w in range(lo, hi):
        for j in range(int(cnt[w])):
            cw = lc[w, j]
            if cw == np.inf:
                continue
            if best is None or cw < lc[best]:
                best = (w, j)
            elif cw == lc[best]:
                an, ab = abs(graph.node_n[w]), abs(graph.node_n[best[0]])
                if an < ab or (an == ab and graph.node_n[w] > graph.node_n[best[0]]):
                    best = (w, j)
    if best is None:
        raise PlanningError("no collision-free path reaches the final layer")
    labels = [best]
    while lpn[labels[-1]] >= 0:
        labels.append((int(lpn[labels[-1]]), int(lpl[labels[-1]])))
    labels.reverse()
    return LatticePath([int(w) for w, _ in labels], float(lc[best]),
                       [float(lt[lab]) for lab in labels], exact=dropped == 0)


def enumerate_paths(graph: LatticeGraph, limit: int = 100_000):
    """Brute-force all start-to-final-layer paths; yields ``(cost, nodes)``.

    Collision tests use each path's own arrival times. Costs are summed in
    path order, as in the sweep, so optimal costs compare exactly.
    """
    final_lo = graph.layer_ptr[-2]
    count = 0
    stack = [(0, 0.0, 0.0, [0])]
    while stack:
        u, c, t, nodes = stack.pop()
        if u >= final_lo:
            count += 1
            if count > limit:
                raise RuntimeError("path limit exceeded")
            yield c, nodes
            continue
        for e in graph.out_edges(u):
            w = int(graph.edge_dst[e])
            if graph.edge_collides(u, w, t):
                continue
            stack.append((w, c + float(graph.edge_cost[e]), t + float(graph.edge_time[e]), nodes + [w]))


def count_paths(graph: LatticeGraph) -> int:
    """Number of start-to-final-layer paths ignoring collisions."""
    ways = np.zeros(graph.n_nodes, dtype=object)
    ways[0] = 1
    for u in range(graph.n_nodes):
        if ways[u]:
            for e in graph.out_edges(u):
                ways[graph.edge_dst[e]] += ways[u]
    return int(sum(ways[graph.layer_ptr[-2]:graph.layer_ptr[-1]]))
