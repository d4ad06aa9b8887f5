"""3-DOF nonlinear single-track vehicle with Pacejka lateral tyres.

State ``x = [V, v, r, X, Y, psi]`` (longitudinal/lateral body velocity, yaw
rate, world position, heading); input ``u = [delta, f_xt]`` (steer angle,
tractive force at the CG).
"""
from __future__ import annotations

import math
from dataclasses import astuple, dataclass

import numba
import numpy as np

STATE_NAMES = ("V", "v", "r", "X", "Y", "psi")
IV, IVY, IR, IX, IY, IPSI = range(6)


@dataclass(frozen=True)
class VehicleState:
    V: float = 0.0
    v: float = 0.0
    r: float = 0.0
    X: float = 0.0
    Y: float = 0.0
    psi: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, x) -> "VehicleState":
        return cls(*(float(v) for v in x[:6]))


@dataclass(frozen=True)
class ControlInput:
    delta: float = 0.0
    f_xt: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.delta, self.f_xt], dtype=float)


@dataclass(frozen=True)
class VehicleParams:
    m: float = 1650.0
    lf: float = 1.8
    lr: float = 1.8
    tr: float = 2.0
    B: float = 6.0
    C: float = 2.5
    D: float = 0.37
    E: float = 1.1
    Cd: float = 0.7
    Af: float = 4.0
    rho: float = 1.225
    Cr: float = 0.02
    g: float = 9.80655
    Jz: float = 2500.0
    h_cg: float = 0.7
    # slip-angle regularisation speed
    v_eps: float = 0.5
    # lateral dynamics blend from kinematic (below lo) to dynamic (above hi)
    v_kin_lo: float = 3.0
    v_kin_hi: float = 6.0
    kin_tau: float = 0.1
    # actuator bounds
    delta_max: float = 0.5
    f_min: float = -12000.0
    f_max: float = 6000.0

    def __post_init__(self):
        for name in ("m", "lf", "lr", "tr", "B", "C", "D", "Cd", "Af", "rho", "g", "Jz",
                     "h_cg", "v_eps", "kin_tau", "delta_max", "f_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"vehicle parameter {name} must be positive")
        if not self.v_kin_hi > self.v_kin_lo >= 0:
            raise ValueError("need v_kin_hi > v_kin_lo >= 0")
        if self.f_min >= self.f_max:
            raise ValueError("need f_min < f_max")

    @property
    def wheelbase(self) -> float:
        return self.lf + self.lr

    def packed(self) -> np.ndarray:
        return np.array([self.m, self.lf, self.lr, self.tr, self.B, self.C, self.D, self.E,
                         self.Cd, self.Af, self.rho, self.Cr, self.g, self.Jz, self.h_cg,
                         self.v_eps, self.v_kin_lo, self.v_kin_hi, self.kin_tau])

    def input_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([-self.delta_max, self.f_min]), np.array([self.delta_max, self.f_max]))


@dataclass(frozen=True)
class DynamicLimits:
    a_max: float
    a_roll: float
    beta_max: float = 0.3
    v_max: float = 1.5

    def __post_init__(self):
        if min(self.a_max, self.a_roll, self.beta_max, self.v_max) <= 0:
            raise ValueError("dynamic limits must be positive")

    @classmethod
    def from_params(cls, p: VehicleParams, beta_max: float = 0.3,
                    v_max: float = 1.5) -> "DynamicLimits":
        """Traction limit ``D*g`` and static stability factor ``g*tr/(2*h_cg)``."""
        return cls(a_max=p.D * p.g, a_roll=p.g * p.tr / (2 * p.h_cg),
                   beta_max=beta_max, v_max=v_max)


class DynamicsDivergence(FloatingPointError):
    """Integration produced a non-finite state."""


@numba.njit(cache=True, inline="always")
def _pacejka(alpha, B, C, D, E):
    ba = B * alpha
    return D * math.sin(C * math.atan(ba - E * (ba - math.atan(ba))))


@numba.njit(cache=True)
def _deriv(x, delta, fxt, P, out):
    m, lf, lr, tr = P[0], P[1], P[2], P[3]
    B, C, D, E = P[4], P[5], P[6], P[7]
    Cd, Af, rho, Cr, g = P[8], P[9], P[10], P[11], P[12]
    Jz, hcg, veps, vlo, vhi, tau = P[13], P[14], P[15], P[16], P[17], P[18]
    V, v, r, psi = x[0], x[1], x[2], x[5]
    L = lf + lr

    # resistive and braking forces fade out at standstill so V never reverses
    gate = min(max(V / veps, 0.0), 1.0)
    f = fxt if fxt >= 0.0 else fxt * gate
    dV = (f - 0.5 * rho * Cd * Af * V * V - m * g * Cr * gate) / m + v * r

    Vs = max(V, veps)
    alpha_f = delta - math.atan2(v + lf * r, Vs)
    alpha_r = -math.atan2(v - lr * r, Vs)
    dfx = f * hcg / L
    fz_f = m * g * lr / L - dfx
    fz_r = m * g * lf / L + dfx
    ay = V * r
    lat_f = m * ay * hcg / tr * (lr / L)
    lat_r = m * ay * hcg / tr * (lf / L)
    load_f = max(0.5 * fz_f + lat_f, 0.0) + max(0.5 * fz_f - lat_f, 0.0)
    load_r = max(0.5 * fz_r + lat_r, 0.0) + max(0.5 * fz_r - lat_r, 0.0)
    fy_f = _pacejka(alpha_f, B, C, D, E) * load_f
    fy_r = _pacejka(alpha_r, B, C, D, E) * load_r
    dv_dyn = (fy_f + fy_r) / m - V * r
    dr_dyn = (lf * fy_f - lr * fy_r) / Jz

    r_kin = V * math.tan(delta) / L
    dv_kin = (lr * r_kin - v) / tau
    dr_kin = (r_kin - r) / tau
    w = min(max((V - vlo) / (vhi - vlo), 0.0), 1.0)

    out[0] = dV
    out[1] = w * dv_dyn + (1.0 - w) * dv_kin
    out[2] = w * dr_dyn + (1.0 - w) * dr_kin
    out[3] = V * math.cos(psi) - v * math.sin(psi)
    out[4] = V * math.sin(psi) + v * math.cos(psi)
    out[5] = r


@numba.njit(cache=True)
def _rk4(x, delta, fxt, P, dt, out, work):
    k1, k2, k3, k4, tmp = work[0], work[1], work[2], work[3], work[4]
    _deriv(x, delta, fxt, P, k1)
    for s in range(6):
        tmp[s] = x[s] + 0.5 * dt * k1[s]
    _deriv(tmp, delta, fxt, P, k2)
    for s in range(6):
        tmp[s] = x[s] + 0.5 * dt * k2[s]
    _deriv(tmp, delta, fxt, P, k3)
    for s in range(6):
        tmp[s] = x[s] + dt * k3[s]
    _deriv(tmp, delta, fxt, P, k4)
    for s in range(6):
        out[s] = x[s] + dt / 6.0 * (k1[s] + 2.0 * k2[s] + 2.0 * k3[s] + k4[s])
    if out[0] < 0.0:
        out[0] = 0.0


# longest single RK4 stage; longer steps are split so prediction steps track
# the plant (lateral tyre and blend time constants are ~0.1 s)
MAX_SUBSTEP = 0.05


@numba.njit(cache=True)
def _integrate(x, delta, fxt, P, dt, out, work):
    """``work`` is a (6, 6) scratch array."""
    n = max(1, int(math.ceil(dt / MAX_SUBSTEP - 1e-9)))
    h = dt / n
    _rk4(x, delta, fxt, P, h, out, work)
    buf = work[5]
    for _ in range(n - 1):
        buf[:] = out
        _rk4(buf, delta, fxt, P, h, out, work)


@numba.njit(cache=True)
def _rollout_batch(x0, controls, P, dt, traj):
    """Integrate every control sequence from ``x0``. Returns the first
    ``(rollout, step)`` that went non-finite, or ``(-1, -1)``."""
    J, N = controls.shape[0], controls.shape[1]
    bad_j, bad_i = -1, -1
    work = np.empty((6, 6))
    for j in range(J):
        for s in range(6):
            traj[j, 0, s] = x0[s]
        for i in range(N):
            _integrate(traj[j, i], controls[j, i, 0], controls[j, i, 1], P, dt, traj[j, i + 1],
                       work)
            if bad_j < 0:
                for s in range(6):
                    if not math.isfinite(traj[j, i + 1, s]):
                        bad_j, bad_i = j, i
                        break
    return bad_j, bad_i


def derivatives(x, u, p: VehicleParams) -> np.ndarray:
    out = np.empty(6)
    _deriv(np.asarray(x, dtype=float), float(u[0]), float(u[1]), p.packed(), out)
    return out


def step(x, u, p: VehicleParams, dt: float) -> np.ndarray:
    """RK4 with the input held constant over ``dt`` (split into sub-steps of at
    most ``MAX_SUBSTEP``)."""
    if dt < 0:
        raise ValueError("dt must be >= 0")
    x = np.asarray(x, dtype=float)
    out = np.empty(6)
    _integrate(x, float(u[0]), float(u[1]), p.packed(), float(dt), out,
               np.empty((6, 6)))
    if not np.all(np.isfinite(out)):
        raise DynamicsDivergence(f"non-finite state after step: {out}")
    return out


def rollout_batch(x0, controls, p: VehicleParams, dt: float) -> np.ndarray:
    """Trajectories ``(J, N+1, 6)`` for control sequences ``(J, N, 2)``."""
    controls = np.ascontiguousarray(controls, dtype=float)
    J, N = controls.shape[:2]
    traj = np.empty((J, N + 1, 6))
    bad_j, bad_i = _rollout_batch(np.asarray(x0, dtype=float), controls, p.packed(),
                                  float(dt), traj)
    if bad_j >= 0:
        raise DynamicsDivergence(f"rollout {bad_j} went non-finite at step {bad_i}")
    return traj


def rollout(x0, controls, p: VehicleParams, dt: float) -> np.ndarray:
    """Trajectory ``(N+1, 6)`` with ``traj[0] == x0``."""
    controls = np.asarray(controls, dtype=float).reshape(-1, 2)
    return rollout_batch(x0, controls[None], p, dt)[0]


def clamp_controls(u: np.ndarray, p: VehicleParams) -> np.ndarray:
    lo, hi = p.input_bounds()
    return np.clip(u, lo, hi)


def wrap_angle(a):
    """Wrap to ``(-pi, pi]``."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)
