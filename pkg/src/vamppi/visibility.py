"""Predicted-visibility uncertainty update for candidate rollouts.

Each rollout casts a sparse fan of horizontal rays over the belief mean at
every pose, accumulates a private count map, spreads it with a Gaussian
kernel and shrinks the belief variance by ``exp(-gamma * counts)``. The
variance used at horizon step ``i`` only sees counts from poses ``< i``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

from .gridmap import VARIANCE_FLOOR, ElevationBelief, GridSpec


@dataclass(frozen=True)
class VisibilityConfig:
    n_rays: int = 20
    points_per_ray: int = 30
    ray_start: float = 2.0
    ray_end: float = 25.0
    fov: float = 72.0
    threshold_height: float = 1.0
    count_value: float = 10.0
    gamma: float = 0.3
    kernel_size: int = 9
    kernel_sigma: float = 1.0
    pose_stride: int = 1

    def __post_init__(self):
        if not self.ray_end > self.ray_start > 0:
            raise ValueError("need ray_end > ray_start > 0")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.kernel_sigma <= 0:
            raise ValueError(f"kernel_sigma must be positive, got {self.kernel_sigma}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.count_value <= 0:
            raise ValueError(f"count_value must be positive, got {self.count_value}")
        if self.n_rays < 1 or self.points_per_ray < 1 or self.pose_stride < 1:
            raise ValueError("n_rays, points_per_ray and pose_stride must be >= 1")

    @property
    def point_spacing(self) -> float:
        if self.points_per_ray == 1:
            return 0.0
        return (self.ray_end - self.ray_start) / (self.points_per_ray - 1)


def gaussian_kernel(size: int = 9, sigma: float = 1.0, normalize: bool = True) -> np.ndarray:
    """``G(x, y) = exp(-(x^2 + y^2) / 2 sigma^2) / (2 pi sigma^2)`` on integer offsets,
    rescaled to unit sum unless ``normalize`` is False."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {size}")
    if not sigma > 0:
        raise ValueError(f"kernel sigma must be positive, got {sigma}")
    r = np.arange(size) - size // 2
    xx, yy = np.meshgrid(r, r, indexing="ij")
    g = np.exp(-(xx ** 2 + yy ** 2) / (2 * sigma ** 2)) / (2 * np.pi * sigma ** 2)
    return g / g.sum() if normalize else g


def _ray_params(cfg: VisibilityConfig) -> np.ndarray:
    return np.array([cfg.n_rays, cfg.points_per_ray, cfg.ray_start, cfg.ray_end,
                     math.radians(cfg.fov), cfg.threshold_height, cfg.count_value,
                     cfg.pose_stride], dtype=float)


@numba.njit(cache=True)
def _cast_pose(x, y, psi, mean, ox, oy, res, rp, counts, touched, n_touched):
    """Add one pose's visible ray points to ``counts``. Returns the new touched count."""
    n = mean.shape[0]
    n_rays = int(rp[0])
    n_pts = int(rp[1])
    r0, r1, fov, h, c = rp[2], rp[3], rp[4], rp[5], rp[6]
    ci = int(math.floor((x - ox) / res))
    cj = int(math.floor((y - oy) / res))
    if ci < 0 or ci >= n or cj < 0 or cj >= n:
        return n_touched
    ray_z = mean[ci, cj] + h
    spacing = (r1 - r0) / (n_pts - 1) if n_pts > 1 else 0.0
    for k in range(n_rays):
        if n_rays > 1:
            theta = psi - 0.5 * fov + fov * k / (n_rays - 1)
        else:
            theta = psi
        gx = (x - ox) / res
        gy = (y - oy) / res
        dx = math.cos(theta) / res
        dy = math.sin(theta) / res
        for p in range(n_pts):
            d = r0 + p * spacing
            fa = gx + d * dx
            fb = gy + d * dy
            if fa < 0.0 or fb < 0.0:
                break
            a = int(fa)
            b = int(fb)
            if a >= n or b >= n:
                break
            if counts[a, b] == 0.0:
                touched[n_touched, 0] = a
                touched[n_touched, 1] = b
                n_touched += 1
            counts[a, b] += c
            if mean[a, b] >= ray_z:
                break
    return n_touched


@numba.njit(cache=True)
def _decayed(v, s, gamma, floor):
    d = v * math.exp(-gamma * s)
    lim = v if v < floor else floor
    return d if d > lim else lim


@numba.njit(cache=True)
def _footprint_variance(trajs, fp, mean, var, ox, oy, res, rp, gamma, kernel,
                        counts, out_var, out_counts):
    """Per-rollout causal variance at footprint points.

    ``fp`` holds world footprint points ``(J, N+1, P, 2)``. ``counts`` is a
    zeroed scratch grid, returned zeroed. Off-map points get NaN.
    """
    J, T, P = fp.shape[0], fp.shape[1], fp.shape[2]
    n = mean.shape[0]
    half = kernel.shape[0] // 2
    stride = int(rp[7])
    max_touched = T * int(rp[0]) * int(rp[1]) + 1
    touched = np.empty((max_touched, 2), dtype=np.int64)
    for j in range(J):
        n_touched = 0
        for i in range(T):
            for k in range(P):
                a = int(math.floor((fp[j, i, k, 0] - ox) / res))
                b = int(math.floor((fp[j, i, k, 1] - oy) / res))
                if a < 0 or a >= n or b < 0 or b >= n:
                    out_var[j, i, k] = np.nan
                    out_counts[j, i, k] = np.nan
                    continue
                s = 0.0
                if n_touched > 0:
                    a0 = max(a - half, 0)
                    a1 = min(a + half + 1, n)
                    b0 = max(b - half, 0)
                    b1 = min(b + half + 1, n)
                    for aa in range(a0, a1):
                        krow = aa - a + half
                        for bb in range(b0, b1):
                            s += kernel[krow, bb - b + half] * counts[aa, bb]
                out_counts[j, i, k] = s
                out_var[j, i, k] = _decayed(var[a, b], s, gamma, VARIANCE_FLOOR)
            if i < T - 1 and i % stride == 0:
                n_touched = _cast_pose(trajs[j, i, 3], trajs[j, i, 4], trajs[j, i, 5], mean,
                                       ox, oy, res, rp, counts, touched, n_touched)
        for t in range(n_touched):
            counts[touched[t, 0], touched[t, 1]] = 0.0


@numba.njit(cache=True)
def _count_map(trajs, mean, ox, oy, res, rp, counts):
    touched = np.empty((trajs.shape[0] * int(rp[0]) * int(rp[1]) + 1, 2), dtype=np.int64)
    n_touched = 0
    stride = int(rp[7])
    for i in range(trajs.shape[0]):
        if i % stride == 0:
            n_touched = _cast_pose(trajs[i, 3], trajs[i, 4], trajs[i, 5], mean, ox, oy, res,
                                   rp, counts, touched, n_touched)


def predicted_visibility(trajectory: np.ndarray, mean_map: np.ndarray, spec: GridSpec,
                         cfg: VisibilityConfig) -> np.ndarray:
    """Raw (unsplatted) count map from casting rays at every pose of ``trajectory``."""
    traj = np.atleast_2d(np.asarray(trajectory, dtype=float))
    counts = np.zeros(spec.shape)
    _count_map(traj, np.ascontiguousarray(mean_map, dtype=float), spec.origin[0],
               spec.origin[1], spec.resolution, _ray_params(cfg), counts)
    return counts


def splat(counts: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Convolve a count map with the kernel, zero padded."""
    return ndimage.convolve(counts, kernel[::-1, ::-1], mode="constant", cval=0.0)


def decay_variance(variance: np.ndarray, counts: np.ndarray, gamma: float) -> np.ndarray:
    """``variance * exp(-gamma * counts)``; never pushed below the variance floor
    unless it already was below it."""
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    decayed = variance * np.exp(-gamma * counts)
    return np.maximum(decayed, np.minimum(variance, VARIANCE_FLOOR))


def rollout_uncertainty_sequence(trajectory: np.ndarray, belief: ElevationBelief,
                                 cfg: VisibilityConfig) -> np.ndarray:
    """Dense variance snapshots ``(N+1, *grid)``; entry ``i`` uses poses ``< i`` only.

    Meant for small maps, tests and figures. The controller uses the lazy
    footprint query in :func:`footprint_variance` instead.
    """
    traj = np.atleast_2d(np.asarray(trajectory, dtype=float))
    kernel = gaussian_kernel(cfg.kernel_size, cfg.kernel_sigma)
    out = np.empty((len(traj),) + belief.spec.shape)
    prefix = np.zeros(belief.spec.shape)
    for i in range(len(traj)):
        out[i] = decay_variance(belief.variance, splat(prefix, kernel), cfg.gamma)
        if i % cfg.pose_stride == 0:
            prefix = prefix + predicted_visibility(traj[i:i + 1], belief.mean, belief.spec,
                                                   VisibilityConfig(**{**cfg.__dict__,
                                                                       "pose_stride": 1}))
    return out


def footprint_variance(trajs: np.ndarray, footprints: np.ndarray, belief: ElevationBelief,
                       cfg: VisibilityConfig, scratch: np.ndarray | None = None,
                       return_counts: bool = False):
    """Causally decayed variance at footprint points of every rollout.

    ``trajs`` is ``(J, N+1, 6)``, ``footprints`` ``(J, N+1, P, 2)`` world points.
    Returns ``(J, N+1, P)`` variances (NaN off-map), optionally with the splatted
    prefix counts at the same points.
    """
    spec = belief.spec
    if scratch is None:
        scratch = np.zeros(spec.shape)
    J, T, P = footprints.shape[:3]
    out_var = np.empty((J, T, P))
    out_counts = np.empty((J, T, P))
    _footprint_variance(np.ascontiguousarray(trajs, dtype=float),
                        np.ascontiguousarray(footprints, dtype=float),
                        belief.mean, belief.variance, spec.origin[0], spec.origin[1],
                        spec.resolution, _ray_params(cfg), cfg.gamma,
                        gaussian_kernel(cfg.kernel_size, cfg.kernel_sigma), scratch,
                        out_var, out_counts)
    if return_counts:
        return out_var, out_counts
    return out_var


def escaped_rays(trajectory: np.ndarray, mean_map: np.ndarray, spec: GridSpec,
                 cfg: VisibilityConfig) -> tuple[int, int]:
    """Count rays whose sparse samples pass a cell at or above ray height that a
    dense walk along the same ray would have stopped at. Returns ``(escaped, total)``."""
    traj = np.atleast_2d(np.asarray(trajectory, dtype=float))
    res = spec.resolution
    n = spec.n_cells
    escaped = total = 0
    pts = cfg.ray_start + cfg.point_spacing * np.arange(cfg.points_per_ray)
    dense = np.arange(cfg.ray_start, pts[-1] + 1e-9, res / 4)
    if cfg.n_rays > 1:
        offsets = np.linspace(-0.5, 0.5, cfg.n_rays) * math.radians(cfg.fov)
    else:
        offsets = np.zeros(1)
    for i in range(0, len(traj), cfg.pose_stride):
        x, y, psi = traj[i, 3], traj[i, 4], traj[i, 5]
        ci, cj = int(math.floor((x - spec.origin[0]) / res)), int(math.floor((y - spec.origin[1]) / res))
        if not (0 <= ci < n and 0 <= cj < n):
            continue
        ray_z = mean_map[ci, cj] + cfg.threshold_height
        for th in psi + offsets:
            total += 1

            def first_block(ds):
                a = np.floor((x + ds * math.cos(th) - spec.origin[0]) / res).astype(int)
                b = np.floor((y + ds * math.sin(th) - spec.origin[1]) / res).astype(int)
                ok = (a >= 0) & (a < n) & (b >= 0) & (b < n)
                a, b, ds = a[ok.cumprod().astype(bool)], b[ok.cumprod().astype(bool)], ds[ok.cumprod().astype(bool)]
                hit = np.nonzero(mean_map[a, b] >= ray_z)[0]
                return ds[hit[0]] if len(hit) else math.inf

            if first_block(dense) < first_block(pts) - 1e-9:
                escaped += 1
    return escaped, total
