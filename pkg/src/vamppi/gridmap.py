"""Fixed-resolution 2.5D elevation grids.

Arrays are indexed ``[i, j]`` with ``i`` along world X and ``j`` along world Y.
Cell ``(i, j)`` covers ``[ox + i*res, ox + (i+1)*res) x [oy + j*res, oy + (j+1)*res)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

VARIANCE_FLOOR = 1e-6

OUT_OF_BOUNDS = (-1, -1)


@dataclass(frozen=True)
class GridSpec:
    side_length: float = 80.0
    resolution: float = 0.2
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        n = self.side_length / self.resolution
        if n < 1 or abs(n - round(n)) > 1e-9:
            raise ValueError(
                f"side_length/resolution must be a positive integer, got {n}")

    @property
    def n_cells(self) -> int:
        return int(round(self.side_length / self.resolution))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_cells, self.n_cells)


def world_to_cell(p, spec: GridSpec) -> tuple[int, int]:
    """Cell containing world point ``p``; ``OUT_OF_BOUNDS`` if off the map."""
    i = int(np.floor((p[0] - spec.origin[0]) / spec.resolution))
    j = int(np.floor((p[1] - spec.origin[1]) / spec.resolution))
    n = spec.n_cells
    if 0 <= i < n and 0 <= j < n:
        return (i, j)
    return OUT_OF_BOUNDS


def world_to_cell_array(xy: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised ``world_to_cell``. Returns ``(i, j, in_bounds)``."""
    xy = np.asarray(xy, dtype=float)
    i = np.floor((xy[..., 0] - spec.origin[0]) / spec.resolution).astype(np.int64)
    j = np.floor((xy[..., 1] - spec.origin[1]) / spec.resolution).astype(np.int64)
    n = spec.n_cells
    ok = (i >= 0) & (i < n) & (j >= 0) & (j < n)
    return i, j, ok


def cell_center(cell, spec: GridSpec) -> tuple[float, float]:
    i, j = cell
    return (spec.origin[0] + (i + 0.5) * spec.resolution,
            spec.origin[1] + (j + 0.5) * spec.resolution)


def cell_centers(spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """World X and Y of every cell centre, each of shape ``spec.shape``."""
    c = (np.arange(spec.n_cells) + 0.5) * spec.resolution
    return np.meshgrid(spec.origin[0] + c, spec.origin[1] + c, indexing="ij")


@dataclass
class GroundTruthMap:
    spec: GridSpec
    elevation: np.ndarray

    def __post_init__(self):
        self.elevation = np.asarray(self.elevation, dtype=float)
        if self.elevation.shape != self.spec.shape:
            raise ValueError(f"elevation shape {self.elevation.shape} != {self.spec.shape}")
        if not np.all(np.isfinite(self.elevation)):
            raise ValueError("ground-truth elevations must be finite")


@dataclass
class ElevationBelief:
    spec: GridSpec
    mean: np.ndarray
    variance: np.ndarray
    observed: np.ndarray = field(default=None)
    # elevation assumed for unobserved cells outside the current view
    free_elevation: float = 0.0

    def __post_init__(self):
        if self.observed is None:
            self.observed = np.zeros(self.spec.shape, dtype=bool)
        for name in ("mean", "variance", "observed"):
            if getattr(self, name).shape != self.spec.shape:
                raise ValueError(f"{name} layer shape {getattr(self, name).shape} != {self.spec.shape}")
        if np.any(self.variance < 0):
            raise ValueError("variance must be non-negative")

    def copy(self) -> "ElevationBelief":
        return replace(self, mean=self.mean.copy(), variance=self.variance.copy(),
                       observed=self.observed.copy())

    @classmethod
    def from_truth(cls, truth: GroundTruthMap) -> "ElevationBelief":
        """Zero-variance, fully observed belief equal to the ground truth."""
        return cls(truth.spec, truth.elevation.copy(), np.zeros(truth.spec.shape),
                   np.ones(truth.spec.shape, dtype=bool))


def init_belief(spec: GridSpec, robot_pose, free_elevation: float = 0.0,
                init_variance: float = 3.0, known_radius: float = 3.0) -> ElevationBelief:
    """Unobserved space assumed free at the robot's elevation; certain only near the robot."""
    if known_radius < 0:
        raise ValueError("known_radius must be >= 0")
    mean = np.full(spec.shape, float(free_elevation))
    variance = np.full(spec.shape, float(init_variance))
    observed = np.zeros(spec.shape, dtype=bool)
    if known_radius > 0:
        cx, cy = cell_centers(spec)
        near = np.hypot(cx - robot_pose[0], cy - robot_pose[1]) <= known_radius
        ij = world_to_cell(robot_pose, spec)
        if ij != OUT_OF_BOUNDS:
            near[ij] = True
        variance[near] = 0.0
        observed[near] = True
    return ElevationBelief(spec, mean, variance, observed, float(free_elevation))


def _nearest_lowest_index(tree: cKDTree, flat_ids: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Nearest source per target, ties broken towards the lowest flat cell index."""
    n_src = len(flat_ids)
    k = min(8, n_src)
    while True:
        d, idx = tree.query(targets, k=k)
        if k == 1:
            return flat_ids[idx]
        # squared lattice distances are exact integers, so equality is safe
        tie = d == d[:, :1]
        if k == n_src or not np.any(tie[:, -1]):
            break
        k = min(2 * k, n_src)
    cand = np.where(tie, flat_ids[idx], np.iinfo(np.int64).max)
    return cand.min(axis=1)


def inpaint_occluded(belief: ElevationBelief, fov_mask: np.ndarray) -> ElevationBelief:
    """Fill unobserved cells inside ``fov_mask`` with the mean of the nearest observed cell.

    Variance and the observed mask are left untouched.
    """
    out = belief.copy()
    holes = fov_mask & ~belief.observed
    if not holes.any() or not belief.observed.any():
        return out
    src = np.argwhere(belief.observed)
    dst = np.argwhere(holes)
    n = belief.spec.n_cells
    flat_src = src[:, 0] * n + src[:, 1]
    nearest = _nearest_lowest_index(cKDTree(src), flat_src, dst)
    out.mean[dst[:, 0], dst[:, 1]] = belief.mean.ravel()[nearest]
    return out


def sample_elevation_at(belief: ElevationBelief, points, n_samples: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Draw ``n_samples`` coherent elevation samples at world ``points``.

    Sample ``s`` is ``mean + xi_s * sqrt(variance)`` with one standard-normal
    ``xi_s`` shared by every point. Returns shape ``(len(points), n_samples)``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    i, j, ok = world_to_cell_array(pts, belief.spec)
    if not np.all(ok):
        bad = pts[np.argmin(ok)]
        raise ValueError(f"point ({bad[0]:.3f}, {bad[1]:.3f}) is outside the map")
    xi = rng.standard_normal(n_samples)
    mu = belief.mean[i, j]
    sd = np.sqrt(belief.variance[i, j])
    return mu[:, None] + sd[:, None] * xi[None, :]


def save_grid(path, spec: GridSpec, values: np.ndarray) -> None:
    """Write a grid as text: header ``width height resolution origin_x origin_y``,
    then one line per Y row (``j``), each holding ``width`` values along X."""
    n = spec.n_cells
    lines = [f"{n} {n} {spec.resolution:.17g} {spec.origin[0]:.17g} {spec.origin[1]:.17g}"]
    for j in range(n):
        lines.append(" ".join(f"{v:.17g}" for v in values[:, j]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_grid(path) -> tuple[GridSpec, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"grid file not found: {path}")
    with path.open() as fh:
        header = fh.readline().split()
        if len(header) != 5:
            raise ValueError(f"{path}: header must be 'width height resolution origin_x origin_y'")
        w, h = int(header[0]), int(header[1])
        res, ox, oy = (float(v) for v in header[2:])
        if w != h:
            raise ValueError(f"{path}: only square maps are supported, got {w}x{h}")
        data = np.loadtxt(fh, ndmin=2)
    if data.shape != (h, w):
        raise ValueError(f"{path}: expected {h} rows of {w} values, got {data.shape}")
    spec = GridSpec(side_length=w * res, resolution=res, origin=(ox, oy))
    return spec, data.T.copy()


def load_ground_truth(path) -> GroundTruthMap:
    spec, elev = load_grid(path)
    return GroundTruthMap(spec, elev)


def export_belief(belief: ElevationBelief, mean_path, variance_path) -> None:
    save_grid(mean_path, belief.spec, belief.mean)
    save_grid(variance_path, belief.spec, belief.variance)
