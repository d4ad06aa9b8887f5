"""Six-term rollout cost: time-to-goal, dynamics, expected surface, distance,
stopping and orientation.

All trajectory arguments are ``(..., N+1, 6)`` state arrays, so every term
works on a single rollout or a batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

import numba
import numpy as np
from scipy.special import expit

from .dynamics import DynamicLimits, VehicleParams, wrap_angle
from .gridmap import ElevationBelief, world_to_cell_array

SAMPLE_MODES = ("common", "independent")


@dataclass(frozen=True)
class CostWeights:
    w_time: float = 1.0
    w_dynamic: float = 50.0
    w_surface: float = 100.0
    w_dist: float = 20.0
    w_acc: float = 5.0
    w_orientation: float = 2.0
    d_activation: float = 10.0
    grad_max: float = 0.25
    step_max: float = 0.1
    rel_height_max: float = 1.5
    n_elev_samples: int = 1000
    footprint_points: int = 5
    # extra points along each flank between the axle arrays; they only feed
    # the relative-height and temporal-step indicators
    side_points: int = 3
    # planning clearance added around the body when placing footprint points
    footprint_margin: float = 0.3
    v_floor: float = 0.3
    d_floor: float = 0.1
    # "common": one standard-normal draw per sample shared by every footprint
    # point; "independent": a fresh draw per point and step.
    sample_mode: str = "common"

    def __post_init__(self):
        for name in ("w_time", "w_dynamic", "w_surface", "w_dist", "w_acc", "w_orientation"):
            if getattr(self, name) < 0:
                raise ValueError(f"cost weight {name} must be >= 0")
        for name in ("grad_max", "step_max", "rel_height_max", "v_floor", "d_floor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_elev_samples < 1:
            raise ValueError("n_elev_samples must be >= 1")
        if self.footprint_points < 2:
            raise ValueError("footprint_points must be >= 2")
        if self.side_points < 0:
            raise ValueError("side_points must be >= 0")
        if self.footprint_margin < 0:
            raise ValueError("footprint_margin must be >= 0")
        if self.sample_mode not in SAMPLE_MODES:
            raise ValueError(f"sample_mode must be one of {SAMPLE_MODES}")


@dataclass(frozen=True)
class Goal:
    x: float
    y: float
    psi: float = 0.0
    radius: float = 2.0
    stop_speed: float = 1.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("goal radius must be positive")

    def distance(self, traj) -> np.ndarray:
        traj = np.asarray(traj)
        return np.hypot(traj[..., 3] - self.x, traj[..., 4] - self.y)


COMPONENTS = ("S_t", "S_dynamic", "S_surface", "S_dist", "S_acc", "S_orientation")


@dataclass
class CostBreakdown:
    """Weighted cost terms, each a scalar or a per-rollout array."""
    S_t: np.ndarray
    S_dynamic: np.ndarray
    S_surface: np.ndarray
    S_dist: np.ndarray
    S_acc: np.ndarray
    S_orientation: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return (self.S_t + self.S_dynamic + self.S_surface + self.S_dist + self.S_acc
                + self.S_orientation)

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in COMPONENTS}


def _checkpoints(n_steps: int) -> tuple[int, int, int]:
    return (round(n_steps / 2), round(3 * n_steps / 4), n_steps)


def time_cost(traj, goal: Goal, w_time: float, v_floor: float = 0.3) -> np.ndarray:
    """``w * (d_a / 4V_a + d_b / 2V_b + d_N / V_N)`` at 2, 3 and 4 s of a 40-step horizon."""
    traj = np.asarray(traj, dtype=float)
    d = goal.distance(traj)
    speed = np.maximum(traj[..., 0], v_floor)
    a, b, n = _checkpoints(traj.shape[-2] - 1)
    return w_time * (d[..., a] / (4 * speed[..., a]) + d[..., b] / (2 * speed[..., b])
                     + d[..., n] / speed[..., n])


def body_accelerations(traj, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Forward-difference body-frame accelerations ``(a_x, a_y)``, shape ``(..., N)``."""
    traj = np.asarray(traj, dtype=float)
    V, v, psi = traj[..., 0], traj[..., 1], traj[..., 5]
    c, s = np.cos(psi), np.sin(psi)
    vx = V * c - v * s
    vy = V * s + v * c
    ax_w = np.diff(vx, axis=-1) / dt
    ay_w = np.diff(vy, axis=-1) / dt
    c0, s0 = c[..., :-1], s[..., :-1]
    return ax_w * c0 + ay_w * s0, -ax_w * s0 + ay_w * c0


def dynamic_cost(traj, limits: DynamicLimits, w_dynamic: float, dt: float = 0.1,
                 v_eps: float = 0.5) -> np.ndarray:
    """``w`` times the number of rollover, traction, side-slip and lateral-velocity events."""
    traj = np.asarray(traj, dtype=float)
    ax, ay = body_accelerations(traj, dt)
    beta = np.arctan2(traj[..., 1], np.maximum(traj[..., 0], v_eps))
    n = ((np.abs(ay) >= limits.a_roll).sum(-1) + (np.hypot(ax, ay) >= limits.a_max).sum(-1)
         + (np.abs(beta) >= limits.beta_max).sum(-1)
         + (np.abs(traj[..., 1]) >= limits.v_max).sum(-1))
    return w_dynamic * n.astype(float)


def activation(d0, d_activation: float) -> np.ndarray:
    """Goal-proximity switch ``1 - 1/(1 + exp(d_A - 2 d0))``; 0.5 at ``d0 = d_A/2``."""
    return expit(d_activation - 2 * np.asarray(d0, dtype=float))


def distance_cost(traj, goal: Goal, w_dist: float, d_activation: float = 10.0) -> np.ndarray:
    traj = np.asarray(traj, dtype=float)
    d = goal.distance(traj)
    d0, dn = d[..., 0], d[..., -1]
    ratio = np.divide(dn, d0, out=np.zeros_like(dn), where=d0 > 0)
    return w_dist * ratio * (1 + 2 * activation(d0, d_activation))


def stop_cost(traj, goal: Goal, w_acc: float, d_floor: float = 0.1) -> np.ndarray:
    """``w * V_N^2 |V_N| / (2 d_N)``: penalises arriving too fast to stop."""
    traj = np.asarray(traj, dtype=float)
    vn = traj[..., -1, 0]
    dn = np.maximum(goal.distance(traj[..., -1, :]), d_floor)
    return w_acc * vn * vn * np.abs(vn) / (2 * dn)


def orientation_cost(traj, goal: Goal, w_orientation: float,
                     d_activation: float = 10.0) -> np.ndarray:
    traj = np.asarray(traj, dtype=float)
    n = traj.shape[-2] - 1
    ramp = np.arange(n + 1) / max(n, 1)
    err = np.abs(wrap_angle(traj[..., 5] - goal.psi))
    d0 = goal.distance(traj[..., 0, :])
    return w_orientation * activation(d0, d_activation) * (err * ramp).sum(-1)


def footprint_offsets(params: VehicleParams, n_points: int = 5, side_points: int = 0,
                      margin: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Body-frame (longitudinal, lateral) offsets: front-axle array, rear-axle
    array, then ``side_points`` evenly spaced stations on each flank. ``margin``
    pushes every point outwards."""
    half = params.tr / 2 + margin
    front, rear = params.lf + margin, params.lr + margin
    lat = np.linspace(-half, half, n_points)
    lon = [np.full(n_points, front), np.full(n_points, -rear)]
    lats = [lat, lat]
    if side_points:
        st = np.linspace(-rear, front, side_points + 2)[1:-1]
        lon += [st, st]
        lats += [np.full(side_points, -half), np.full(side_points, half)]
    return np.concatenate(lon), np.concatenate(lats)


def footprint_points(traj, params: VehicleParams, n_points: int = 5,
                     side_points: int = 0, margin: float = 0.0) -> np.ndarray:
    """World XY of the footprint points for every pose: ``(..., N+1, K, 2)`` with
    ``K = 2 * n_points + 2 * side_points``."""
    traj = np.asarray(traj, dtype=float)
    lon, lat = footprint_offsets(params, n_points, side_points, margin)
    c = np.cos(traj[..., 5])[..., None]
    s = np.sin(traj[..., 5])[..., None]
    x = traj[..., 3][..., None] + lon * c - lat * s
    y = traj[..., 4][..., None] + lon * s + lat * c
    return np.stack([x, y], axis=-1)


def array_geometry(params: VehicleParams, weights: CostWeights) -> tuple[float, float]:
    """(lateral point spacing, front-to-rear array distance) of the cost footprint."""
    m = weights.footprint_margin
    return ((params.tr + 2 * m) / (weights.footprint_points - 1), params.wheelbase + 2 * m)


@numba.njit(cache=True)
def _exceed_fraction(a, b, t, xi_sorted):
    """Fraction of samples with ``|a + xi * b| > t`` for sorted ``xi``."""
    n = xi_sorted.shape[0]
    if b == 0.0:
        return 1.0 if abs(a) > t else 0.0
    # |a + xi b| > t  <=>  xi > (t - a)/b or xi < (-t - a)/b for b > 0
    lo = (-t - a) / b
    hi = (t - a) / b
    if lo > hi:
        lo, hi = hi, lo
    below = np.searchsorted(xi_sorted, lo, side="left")
    above = n - np.searchsorted(xi_sorted, hi, side="right")
    return (below + above) / n


@numba.njit(cache=True)
def _surface_batch(mu, sd, off, mu0, sd0, xi, n_pts, spacing, wheelbase, grad_max,
                   step_max, rel_max, out):
    J, T, K = mu.shape[0], mu.shape[1], mu.shape[2]
    for j in range(J):
        total = 0.0
        for i in range(T):
            for k in range(K):
                if off[j, i, k]:
                    total += 1.0
                else:
                    total += _exceed_fraction(mu[j, i, k] - mu0, sd[j, i, k] - sd0, rel_max, xi)
            for l in range(n_pts):
                f, r = l, n_pts + l
                if not (off[j, i, f] or off[j, i, r]):
                    total += _exceed_fraction((mu[j, i, f] - mu[j, i, r]) / wheelbase,
                                              (sd[j, i, f] - sd[j, i, r]) / wheelbase, grad_max, xi)
            for base in (0, n_pts):
                for l in range(n_pts - 1):
                    p, q = base + l, base + l + 1
                    if off[j, i, p] or off[j, i, q]:
                        continue
                    da = mu[j, i, q] - mu[j, i, p]
                    db = sd[j, i, q] - sd[j, i, p]
                    total += _exceed_fraction(da / spacing, db / spacing, grad_max, xi)
                    total += _exceed_fraction(da, db, step_max, xi)
            if i > 0:
                for k in range(K):
                    if off[j, i, k] or off[j, i - 1, k]:
                        continue
                    total += _exceed_fraction(mu[j, i, k] - mu[j, i - 1, k],
                                              sd[j, i, k] - sd[j, i - 1, k], step_max, xi)
        out[j] = total


def _surface_indicators(z, z0, off, n_pts, spacing, wheelbase, w: CostWeights) -> np.ndarray:
    """Indicator count per sample for elevations ``z`` ``(J, T, 2P, S)`` and
    CG elevation ``z0`` ``(S,)`` or ``(J, S)``; NaN-free where ``off`` is False."""
    z0 = np.asarray(z0)
    z0 = z0[:, None, None, :] if z0.ndim == 2 else z0
    ok = ~off[..., None]
    cnt = np.where(off[..., None], 1.0, np.abs(z - z0) > w.rel_height_max).sum(axis=(1, 2))
    f, r = z[:, :, :n_pts], z[:, :, n_pts:2 * n_pts]
    okx = ok[:, :, :n_pts] & ok[:, :, n_pts:2 * n_pts]
    cnt = cnt + (okx & (np.abs(f - r) / wheelbase > w.grad_max)).sum(axis=(1, 2))
    for arr, oka in ((f, ok[:, :, :n_pts]), (r, ok[:, :, n_pts:2 * n_pts])):
        d = np.diff(arr, axis=2)
        okp = oka[:, :, 1:] & oka[:, :, :-1]
        cnt = cnt + (okp & (np.abs(d) / spacing > w.grad_max)).sum(axis=(1, 2))
        cnt = cnt + (okp & (np.abs(d) > w.step_max)).sum(axis=(1, 2))
    okt = ok[:, 1:] & ok[:, :-1]
    cnt = cnt + (okt & (np.abs(np.diff(z, axis=1)) > w.step_max)).sum(axis=(1, 2))
    return cnt


def surface_cost(traj, belief: ElevationBelief, variances, weights: CostWeights,
                 params: VehicleParams, rng: np.random.Generator | None = None,
                 xi: np.ndarray | None = None) -> np.ndarray:
    """Expected number of surface-indicator violations, times ``w_surface``.

    ``variances`` gives the footprint-point variance per step ``(J, N+1, K)``
    (NaN marks off-map points) or ``None`` for zero variance. In ``common``
    mode the expectation is evaluated exactly over the sorted standard-normal
    draws ``xi`` (drawn from ``rng`` when not given); ``independent`` mode
    draws every point separately and averages indicator counts.
    """
    traj = np.asarray(traj, dtype=float)
    single = traj.ndim == 2
    trajs = traj[None] if single else traj
    P = weights.footprint_points
    fp = footprint_points(trajs, params, P, weights.side_points, weights.footprint_margin)
    i, j, ok = world_to_cell_array(fp, belief.spec)
    off = ~ok
    ic, jc = np.where(ok, i, 0), np.where(ok, j, 0)
    mu = np.where(ok, belief.mean[ic, jc], 0.0)
    if variances is None:
        var = np.zeros(mu.shape)
    else:
        var = np.asarray(variances, dtype=float).reshape(mu.shape)
    sd = np.sqrt(np.where(ok, var, 0.0))
    i0, j0, ok0 = world_to_cell_array(trajs[0, 0, 3:5], belief.spec)
    if not ok0:
        raise ValueError("vehicle position is outside the map")
    mu0 = float(belief.mean[i0, j0])
    sd0 = math.sqrt(float(belief.variance[i0, j0]))
    spacing, base = array_geometry(params, weights)
    if xi is None and (np.any(sd > 0) or sd0 > 0):
        if rng is None:
            raise ValueError("an rng or xi draws are needed for nonzero variance")
        xi = rng.standard_normal(weights.n_elev_samples)
    if xi is None:
        xi = np.zeros(1)
    if weights.sample_mode == "common":
        out = np.empty(len(trajs))
        _surface_batch(np.ascontiguousarray(mu), np.ascontiguousarray(sd), np.ascontiguousarray(off),
                       mu0, sd0, np.sort(np.asarray(xi, dtype=float)), P, spacing,
                       base, weights.grad_max, weights.step_max,
                       weights.rel_height_max, out)
    else:
        S = weights.n_elev_samples
        if rng is None:
            raise ValueError("independent sampling needs an rng")
        out = np.empty(len(trajs))
        for r in range(len(trajs)):
            z = mu[r, ..., None] + sd[r, ..., None] * rng.standard_normal(mu[r].shape + (S,))
            z0 = mu0 + sd0 * rng.standard_normal(S)
            out[r] = _surface_indicators(z[None], z0, off[r:r + 1], P, spacing, base,
                                         weights).mean()
    out = weights.w_surface * out
    return out[0] if single else out


def surface_cost_sampled(traj, belief: ElevationBelief, variances, weights: CostWeights,
                         params: VehicleParams, xi: np.ndarray) -> np.ndarray:
    """Reference evaluation of the common-sample surface cost by explicit
    enumeration of every sample. Slow; used to check :func:`surface_cost`."""
    traj = np.asarray(traj, dtype=float)
    trajs = traj[None] if traj.ndim == 2 else traj
    P = weights.footprint_points
    fp = footprint_points(trajs, params, P, weights.side_points, weights.footprint_margin)
    i, j, ok = world_to_cell_array(fp, belief.spec)
    ic, jc = np.where(ok, i, 0), np.where(ok, j, 0)
    mu = np.where(ok, belief.mean[ic, jc], 0.0)
    var = np.zeros(mu.shape) if variances is None else np.asarray(variances).reshape(mu.shape)
    sd = np.sqrt(np.where(ok, var, 0.0))
    i0, j0, _ = world_to_cell_array(trajs[0, 0, 3:5], belief.spec)
    xi = np.asarray(xi, dtype=float)
    z = mu[..., None] + sd[..., None] * xi
    z0 = belief.mean[i0, j0] + math.sqrt(belief.variance[i0, j0]) * xi
    spacing, base = array_geometry(params, weights)
    cnt = _surface_indicators(z, z0, ~ok, P, spacing, base, weights)
    out = weights.w_surface * cnt.mean(axis=-1)
    return out[0] if traj.ndim == 2 else out


def total_cost(traj, goal: Goal, weights: CostWeights, limits: DynamicLimits,
               params: VehicleParams, belief: ElevationBelief, variances=None,
               dt: float = 0.1, rng: np.random.Generator | None = None,
               xi: np.ndarray | None = None) -> CostBreakdown:
    """All six weighted terms. ``variances`` is ``None`` for zero-variance planning."""
    return CostBreakdown(
        S_t=time_cost(traj, goal, weights.w_time, weights.v_floor),
        S_dynamic=dynamic_cost(traj, limits, weights.w_dynamic, dt, params.v_eps),
        S_surface=surface_cost(traj, belief, variances, weights, params, rng, xi),
        S_dist=distance_cost(traj, goal, weights.w_dist, weights.d_activation),
        S_acc=stop_cost(traj, goal, weights.w_acc, weights.d_floor),
        S_orientation=orientation_cost(traj, goal, weights.w_orientation, weights.d_activation),
    )


def write_breakdown_csv(path, rows) -> None:
    """Rows of ``(step, rollout, CostBreakdown-of-scalars)``."""
    lines = ["step,rollout," + ",".join(COMPONENTS)]
    for step_i, rollout_i, bd in rows:
        vals = ",".join(f"{float(getattr(bd, c)):.10g}" for c in COMPONENTS)
        lines.append(f"{step_i},{rollout_i},{vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def weights_fields() -> list[str]:
    return [f.name for f in fields(CostWeights)]
