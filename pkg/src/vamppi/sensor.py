"""Simulated forward-facing depth camera and belief fusion."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .gridmap import (VARIANCE_FLOOR, ElevationBelief, GridSpec, GroundTruthMap,
                      inpaint_occluded, world_to_cell)


@dataclass(frozen=True)
class SensorSpec:
    fov: float = 72.0                 # degrees, horizontal
    max_range: float = 25.0           # metres, horizontal distance
    mount_height: float = 1.5
    azimuth_rays: int = 144
    # None sweeps the whole vertical FOV continuously (every visible cell top
    # along an azimuth is a hit); an int casts that many discrete rays.
    elevation_rays: int | None = None
    # nominal depth image; in the continuous sweep a hit counts as many
    # observation events as pixels whose rays land in the cell
    pixel_rows: int = 480
    pixel_cols: int = 640
    vfov_down: float = 45.0           # degrees below horizontal
    vfov_up: float = 15.0             # degrees above horizontal
    gamma_obs: float = 0.3

    def __post_init__(self):
        if not 0 < self.fov < 180:
            raise ValueError(f"fov must be in (0, 180), got {self.fov}")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if self.azimuth_rays < 2:
            raise ValueError("azimuth_rays must be >= 2")
        if self.elevation_rays is not None and self.elevation_rays < 2:
            raise ValueError("elevation_rays must be >= 2")
        if self.pixel_rows < 2 or self.pixel_cols < 1:
            raise ValueError("pixel_rows must be >= 2 and pixel_cols >= 1")
        if not (0 < self.vfov_down < 90 and 0 <= self.vfov_up < 90):
            raise ValueError("vertical FOV limits must lie in (0, 90) degrees")

    def slopes(self) -> np.ndarray:
        """Ray slopes (rise over horizontal run) of the discrete elevation fan."""
        if self.elevation_rays is None:
            return np.empty(0)
        ang = np.linspace(-math.radians(self.vfov_down), math.radians(self.vfov_up),
                          self.elevation_rays)
        return np.tan(ang)

    def columns_per_ray(self) -> float:
        """Image columns represented by one azimuth ray of the continuous sweep."""
        return 1.0 if self.elevation_rays is not None else self.pixel_cols / self.azimuth_rays

    def row_pitch(self) -> float:
        """Angle between neighbouring rows of the elevation fan (radians)."""
        rows = self.pixel_rows if self.elevation_rays is None else self.elevation_rays
        return math.radians(self.vfov_down + self.vfov_up) / (rows - 1)


@dataclass
class ObservationSet:
    """One depth frame: unique hit cells with their measured elevation."""
    cells: np.ndarray           # (K, 2) int
    elevations: np.ndarray      # (K,)
    frustum_mask: np.ndarray    # grid-shaped bool
    hit_points: np.ndarray      # (K, 3) world point where the ray met the cell
    camera: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # observation events per cell (camera returns landing in it); None means one each
    counts: np.ndarray | None = None

    def events(self) -> np.ndarray:
        return np.ones(len(self.cells)) if self.counts is None else self.counts

    def __len__(self):
        return len(self.cells)

    def to_csv(self, path) -> None:
        rows = ["cell_i,cell_j,elevation"]
        rows += [f"{i},{j},{z:.17g}" for (i, j), z in zip(self.cells, self.elevations)]
        Path(path).write_text("\n".join(rows) + "\n")


@numba.njit(cache=True)
def _sweep(elev, ox, oy, res, cx, cy, cz, heading, fov, max_range, n_az,
           slopes, s_lo, s_hi, pitch, out_cells, out_pts, out_w):
    n = elev.shape[0]
    count = 0
    discrete = slopes.shape[0] > 0
    for a in range(n_az):
        theta = heading - 0.5 * fov + fov * a / (n_az - 1)
        dx = math.cos(theta)
        dy = math.sin(theta)
        gx = (cx - ox) / res
        gy = (cy - oy) / res
        i = int(math.floor(gx))
        j = int(math.floor(gy))
        if dx > 0:
            step_i = 1
            t_max_x = ((i + 1) - gx) * res / dx
            t_dx = res / dx
        elif dx < 0:
            step_i = -1
            t_max_x = (gx - i) * res / -dx
            t_dx = res / -dx
        else:
            step_i = 0
            t_max_x = math.inf
            t_dx = math.inf
        if dy > 0:
            step_j = 1
            t_max_y = ((j + 1) - gy) * res / dy
            t_dy = res / dy
        elif dy < 0:
            step_j = -1
            t_max_y = (gy - j) * res / -dy
            t_dy = res / -dy
        else:
            step_j = 0
            t_max_y = math.inf
            t_dy = math.inf
        t_in = 0.0
        s_prev = -math.inf
        while 0 <= i < n and 0 <= j < n and t_in < max_range:
            t_out = min(t_max_x, t_max_y, max_range)
            if t_out <= t_in:
                # ray starts on a cell boundary and only grazes this cell
                if t_max_x < t_max_y:
                    i += step_i
                    t_max_x += t_dx
                else:
                    j += step_j
                    t_max_y += t_dy
                continue
            dz = elev[i, j] - cz
            if t_in > 0.0:
                bound = max(dz / t_in, dz / t_out)
            elif dz > 0.0:
                bound = math.inf
            elif dz < 0.0:
                bound = dz / t_out
            else:
                bound = 0.0
            lo = max(s_prev, s_lo)
            hi = min(bound, s_hi)
            hit = False
            s_star = 0.0
            w = 0.0
            if discrete:
                # smallest fan slope strictly above the current horizon
                k = np.searchsorted(slopes, s_prev, side="right")
                if k < slopes.shape[0] and slopes[k] <= hi:
                    hit = True
                    s_star = slopes[k]
                    w = np.searchsorted(slopes, hi, side="right") - k
            elif lo < hi:
                hit = True
                s_star = 0.5 * (lo + hi)
                w = (math.atan(hi) - math.atan(lo)) / pitch
            if hit:
                if cz + s_star * t_in <= elev[i, j]:
                    t_hit = t_in
                    z_hit = cz + s_star * t_in
                else:
                    t_hit = dz / s_star
                    z_hit = elev[i, j]
                out_cells[count, 0] = i
                out_cells[count, 1] = j
                out_pts[count, 0] = cx + dx * t_hit
                out_pts[count, 1] = cy + dy * t_hit
                out_pts[count, 2] = z_hit
                out_w[count] = w
                count += 1
                if count >= out_cells.shape[0]:
                    return count
            if bound > s_prev:
                s_prev = bound
            if s_prev >= s_hi:
                break
            if t_max_x < t_max_y:
                i += step_i
                t_in = t_max_x
                t_max_x += t_dx
            else:
                j += step_j
                t_in = t_max_y
                t_max_y += t_dy
    return count


def frustum_mask(spec: GridSpec, x: float, y: float, heading: float,
                 fov_deg: float, max_range: float) -> np.ndarray:
    """Cells whose centre lies within ``max_range`` and half the FOV of the heading."""
    n = spec.n_cells
    res = spec.resolution
    i0 = max(int((x - max_range - spec.origin[0]) / res) - 1, 0)
    i1 = min(int((x + max_range - spec.origin[0]) / res) + 2, n)
    j0 = max(int((y - max_range - spec.origin[1]) / res) - 1, 0)
    j1 = min(int((y + max_range - spec.origin[1]) / res) + 2, n)
    mask = np.zeros(spec.shape, dtype=bool)
    if i0 >= i1 or j0 >= j1:
        return mask
    cx = spec.origin[0] + (np.arange(i0, i1) + 0.5) * res
    cy = spec.origin[1] + (np.arange(j0, j1) + 0.5) * res
    ddx = cx[:, None] - x
    ddy = cy[None, :] - y
    rng = np.hypot(ddx, ddy)
    bearing = np.arctan2(ddy, ddx) - heading
    bearing = (bearing + np.pi) % (2 * np.pi) - np.pi
    mask[i0:i1, j0:j1] = (rng <= max_range) & (np.abs(bearing) <= math.radians(fov_deg) / 2)
    return mask


def raycast_3d(truth: GroundTruthMap, pose, spec: SensorSpec) -> ObservationSet:
    """Ray-cast the camera against the ground truth. ``pose`` is ``[V, v, r, X, Y, psi]``."""
    x, y, psi = float(pose[3]), float(pose[4]), float(pose[5])
    gspec = truth.spec
    cell = world_to_cell((x, y), gspec)
    if cell[0] < 0 or not all(math.isfinite(v) for v in (x, y, psi)):
        return ObservationSet(np.empty((0, 2), dtype=np.int64), np.empty(0),
                              np.zeros(gspec.shape, dtype=bool), np.empty((0, 3)))
    cz = truth.elevation[cell] + spec.mount_height
    max_hits = spec.azimuth_rays * (int(2 * spec.max_range / gspec.resolution) + 4)
    cells = np.empty((max_hits, 2), dtype=np.int64)
    pts = np.empty((max_hits, 3))
    w = np.empty(max_hits)
    k = _sweep(truth.elevation, gspec.origin[0], gspec.origin[1], gspec.resolution,
               x, y, cz, psi, math.radians(spec.fov), spec.max_range, spec.azimuth_rays,
               spec.slopes(), -math.tan(math.radians(spec.vfov_down)),
               math.tan(math.radians(spec.vfov_up)), spec.row_pitch(), cells, pts, w)
    cells, pts, w = cells[:k], pts[:k], w[:k]
    n = gspec.n_cells
    _, first, inverse = np.unique(cells[:, 0] * n + cells[:, 1], return_index=True,
                                  return_inverse=True)
    counts = np.bincount(inverse.ravel(), weights=w, minlength=len(first)) * spec.columns_per_ray()
    order = np.argsort(first)
    cells, pts, counts = cells[first[order]], pts[first[order]], counts[order]
    mask = frustum_mask(gspec, x, y, psi, spec.fov, spec.max_range)
    mask[cells[:, 0], cells[:, 1]] = True
    return ObservationSet(cells, truth.elevation[cells[:, 0], cells[:, 1]].copy(),
                          mask, pts, (x, y, cz), counts)


def fuse_observations(belief: ElevationBelief, obs: ObservationSet,
                      gamma_obs: float = 0.3) -> ElevationBelief:
    """Write noise-free hits into the belief, decay their variance by
    ``exp(-gamma_obs * events)``, then inpaint occluded cells of the frustum.

    Inpainting is a view of the current frame: unobserved cells first revert
    to the free elevation, so fills from earlier frames do not persist.
    """
    out = belief.copy()
    out.mean[~out.observed] = out.free_elevation
    if len(obs):
        i, j = obs.cells[:, 0], obs.cells[:, 1]
        out.mean[i, j] = obs.elevations
        v = out.variance[i, j]
        out.variance[i, j] = np.maximum(v * np.exp(-gamma_obs * obs.events()),
                                        np.minimum(v, VARIANCE_FLOOR))
        out.observed[i, j] = True
    return inpaint_occluded(out, obs.frustum_mask)


def line_of_sight_blocked(elev: np.ndarray, spec: GridSpec, camera, target,
                          exclude_cell, eps: float = 1e-9) -> bool:
    """Brute-force check: does any cell column strictly rise above the segment
    camera->target? Every cell of the map is clipped against the segment."""
    c = np.asarray(camera, dtype=float)
    t = np.asarray(target, dtype=float)
    d = t - c
    n = spec.n_cells
    res = spec.resolution
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    x0 = spec.origin[0] + ii * res
    y0 = spec.origin[1] + jj * res
    lo = np.zeros_like(x0)
    hi = np.ones_like(x0)
    # Liang-Barsky clip of the 2D segment against every cell square
    for p0, dp, a, b in ((c[0], d[0], x0, x0 + res), (c[1], d[1], y0, y0 + res)):
        if abs(dp) < 1e-15:
            inside = (p0 >= a) & (p0 <= b)
            lo = np.where(inside, lo, 1.0)
            hi = np.where(inside, hi, 0.0)
        else:
            ta = (a - p0) / dp
            tb = (b - p0) / dp
            lo = np.maximum(lo, np.minimum(ta, tb))
            hi = np.minimum(hi, np.maximum(ta, tb))
    seg_len = math.hypot(d[0], d[1])
    crosses = (hi - lo) * seg_len > eps
    crosses[exclude_cell[0], exclude_cell[1]] = False
    z_min = c[2] + d[2] * np.where(d[2] < 0, hi, lo)
    return bool(np.any(crosses & (elev > z_min + eps)))
