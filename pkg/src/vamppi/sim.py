"""Scenarios, closed-loop episodes (10 Hz control, 50 Hz plant) and batches."""
from __future__ import annotations

import csv
import json
import math
import multiprocessing as mp
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cost import CostWeights, Goal
from .dynamics import DynamicsDivergence, VehicleParams, VehicleState, step
from .gridmap import (ElevationBelief, GridSpec, GroundTruthMap, init_belief, load_ground_truth,
                      world_to_cell)
from .mppi import ControllerVariant, MppiConfig, MppiController
from .sensor import SensorSpec, fuse_observations, raycast_3d
from .visibility import VisibilityConfig

OUTCOMES = ("success", "collision", "stop_failure", "timeout", "diverged")
OBSTACLE_CLEARANCE = 0.5
STOP_FAILURE_RADIUS = 6.0
PLANT_SUBSTEPS = 5
WORKERS_ENV = "VAMPPI_WORKERS"


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    sx: float
    sy: float
    height: float

    def cells(self, spec: GridSpec) -> tuple[slice, slice]:
        res, (ox, oy) = spec.resolution, spec.origin
        i0 = int(round((self.cx - self.sx / 2 - ox) / res))
        i1 = int(round((self.cx + self.sx / 2 - ox) / res))
        j0 = int(round((self.cy - self.sy / 2 - oy) / res))
        j1 = int(round((self.cy + self.sy / 2 - oy) / res))
        return slice(max(i0, 0), i1), slice(max(j0, 0), j1)


@dataclass
class Scenario:
    name: str
    truth: GroundTruthMap
    start: VehicleState
    goal: Goal
    obstacles: list[Box] = field(default_factory=list)
    hidden: list[int] = field(default_factory=list)
    timeout: float = 40.0

    def __post_init__(self):
        for label, (x, y) in (("start", (self.start.X, self.start.Y)),
                              ("goal", (self.goal.x, self.goal.y))):
            if world_to_cell((x, y), self.truth.spec)[0] < 0:
                raise ValueError(f"scenario {self.name}: {label} lies outside the map")


def rasterize(spec: GridSpec, boxes, ground: float = 0.0) -> np.ndarray:
    elev = np.full(spec.shape, float(ground))
    for b in boxes:
        si, sj = b.cells(spec)
        elev[si, sj] = np.maximum(elev[si, sj], ground + b.height)
    return elev


def hits_on_box(obs, box: Box, spec: GridSpec) -> int:
    si, sj = box.cells(spec)
    c = obs.cells
    return int(np.sum((c[:, 0] >= si.start) & (c[:, 0] < si.stop)
                      & (c[:, 1] >= sj.start) & (c[:, 1] < sj.stop)))


def _assert_hidden(truth: GroundTruthMap, poses, boxes, sensor: SensorSpec, name: str):
    for pose in poses:
        obs = raycast_3d(truth, pose, sensor)
        for b in boxes:
            if hits_on_box(obs, b, truth.spec):
                raise AssertionError(f"{name}: hidden obstacle {b} is visible from pose "
                                     f"({pose[3]:.1f}, {pose[4]:.1f}, {pose[5]:.2f})")


ALLEYWAY_GEOMETRY = dict(
    y_lo=32.0, y_hi=48.0, wall_h=2.5, start_x=8.0, goal_x=66.0,
    block_x=34.0, block_sx=4.0, block_sy=6.0,
    flank_x=42.5, flank_dy=3.6, flank_sx=2.0, flank_sy=2.4, flank_h=1.5,
)

OFFROAD_GEOMETRY = dict(
    road_y=15.0, tree_y=18.0, tree_width=1.0, tree_h=4.0, tree_start=2.0, tree_end=50.0,
    gap=10.0, tree_resume_end=78.0,
    start_x=8.0, goal_x=36.0, goal_y=50.0, goal_psi=2.15,
    hidden=((55.5, 25.0), (57.0, 29.5)), hidden_size=3.5, hidden_h=1.5,
    # the blocks must stay hidden from every road pose up to this X
    hidden_until=49.0,
)


def build_alleyway(spec: GridSpec = GridSpec(), sensor: SensorSpec = SensorSpec(),
                   **geometry) -> Scenario:
    """Walled alley along +X with a central block hiding two flanking blocks."""
    g = {**ALLEYWAY_GEOMETRY, **geometry}
    yc = 0.5 * (g["y_lo"] + g["y_hi"])
    length = g["goal_x"] - g["start_x"] + 16.0
    xc = 0.5 * (g["goal_x"] + g["start_x"])
    height = g["y_hi"] - g["y_lo"] + 2.0
    boxes = [
        Box(xc, g["y_lo"] - 0.5, length, 1.0, g["wall_h"]),
        Box(xc, g["y_hi"] + 0.5, length, 1.0, g["wall_h"]),
        Box(xc - length / 2 + 0.5, yc, 1.0, height, g["wall_h"]),
        Box(xc + length / 2 - 0.5, yc, 1.0, height, g["wall_h"]),
        Box(g["block_x"], yc, g["block_sx"], g["block_sy"], g["wall_h"]),
        Box(g["flank_x"], yc - g["flank_dy"], g["flank_sx"], g["flank_sy"], g["flank_h"]),
        Box(g["flank_x"], yc + g["flank_dy"], g["flank_sx"], g["flank_sy"], g["flank_h"]),
    ]
    truth = GroundTruthMap(spec, rasterize(spec, boxes))
    start = VehicleState(X=g["start_x"], Y=yc)
    sc = Scenario("alleyway", truth, start, Goal(g["goal_x"], yc, 0.0), boxes, hidden=[5, 6])
    _assert_hidden(truth, [start.as_array()], [boxes[i] for i in sc.hidden], sensor, sc.name)
    return sc


def build_offroad(spec: GridSpec = GridSpec(), sensor: SensorSpec = SensorSpec(),
                  **geometry) -> Scenario:
    """Road along +X separated from a field on its left by a tree line with a
    gap; hidden blocks sit in the field just behind the trees before the gap."""
    g = {**OFFROAD_GEOMETRY, **geometry}
    t0, t1 = g["tree_start"], g["tree_end"]
    boxes = [Box(0.5 * (t0 + t1), g["tree_y"], t1 - t0, g["tree_width"], g["tree_h"])]
    r0, r1 = t1 + g["gap"], g["tree_resume_end"]
    if r1 > r0:
        boxes.append(Box(0.5 * (r0 + r1), g["tree_y"], r1 - r0, g["tree_width"], g["tree_h"]))
    n_trees = len(boxes)
    boxes += [Box(x, y, g["hidden_size"], g["hidden_size"], g["hidden_h"]) for x, y in g["hidden"]]
    truth = GroundTruthMap(spec, rasterize(spec, boxes))
    start = VehicleState(X=g["start_x"], Y=g["road_y"])
    sc = Scenario("offroad", truth, start, Goal(g["goal_x"], g["goal_y"], g["goal_psi"]), boxes,
                  hidden=list(range(n_trees, len(boxes))))
    road = [VehicleState(X=x, Y=g["road_y"]).as_array()
            for x in np.arange(start.X, g["hidden_until"] + 1e-9, 1.0)]
    _assert_hidden(truth, road, [boxes[i] for i in sc.hidden], sensor, sc.name)
    return sc


SCENARIOS = {"alleyway": build_alleyway, "offroad": build_offroad}


def load_scenario(name_or_path: str, start=None, goal=None) -> Scenario:
    if name_or_path in SCENARIOS:
        return SCENARIOS[name_or_path]()
    path = Path(name_or_path)
    if not path.exists():
        raise FileNotFoundError(f"scenario file not found: {path}")
    truth = load_ground_truth(path)
    if start is None or goal is None:
        raise ValueError(f"map file {path} needs start and goal poses")
    return Scenario(path.stem, truth, VehicleState(X=start[0], Y=start[1], psi=start[2]),
                    Goal(goal[0], goal[1], goal[2]))


def footprint_collides(truth: GroundTruthMap, x: float, y: float, psi: float,
                       length: float, width: float,
                       clearance: float = OBSTACLE_CLEARANCE) -> bool:
    """Does the ``length x width`` rectangle at the pose overlap a cell standing
    ``clearance`` above the lowest cell under the footprint? Leaving the map counts."""
    spec = truth.spec
    res, (ox, oy), n = spec.resolution, spec.origin, spec.n_cells
    c, s = math.cos(psi), math.sin(psi)
    hl, hw = length / 2, width / 2
    ext_x = abs(c) * hl + abs(s) * hw
    ext_y = abs(s) * hl + abs(c) * hw
    i0 = int(math.floor((x - ext_x - ox) / res))
    i1 = int(math.floor((x + ext_x - ox) / res))
    j0 = int(math.floor((y - ext_y - oy) / res))
    j1 = int(math.floor((y + ext_y - oy) / res))
    if i0 < 0 or j0 < 0 or i1 >= n or j1 >= n:
        return True
    ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
    # separating-axis test along the rectangle's own axes (the grid axes are
    # already covered by the bounding-box window)
    cx = ox + (ii + 0.5) * res - x
    cy = oy + (jj + 0.5) * res - y
    r = res / 2
    lon = np.abs(cx * c + cy * s)
    lat = np.abs(-cx * s + cy * c)
    cell_r_lon = r * (abs(c) + abs(s))
    overlap = (lon < hl + cell_r_lon) & (lat < hw + cell_r_lon)
    if not overlap.any():
        return False
    z = truth.elevation[ii, jj][overlap]
    return bool(z.max() >= z.min() + clearance)


@dataclass
class EpisodeConfig:
    mppi: MppiConfig = field(default_factory=MppiConfig)
    weights: CostWeights = field(default_factory=CostWeights)
    vis: VisibilityConfig = field(default_factory=VisibilityConfig)
    params: VehicleParams = field(default_factory=VehicleParams)
    sensor: SensorSpec = field(default_factory=SensorSpec)
    init_variance: float = 3.0
    known_radius: float = 3.0
    timeout: float | None = None


@dataclass
class RunRecord:
    scenario: str
    variant: str
    J: int
    seed: int
    outcome: str
    time_to_goal: float | None
    trajectory: np.ndarray                 # (T, 9): t, state(6), delta, f_xt
    diagnostics: list[dict] = field(default_factory=list)
    unobserved_steps: int = 0
    plant_steps: int = 0
    message: str = ""

    @property
    def unobserved_fraction(self) -> float:
        return self.unobserved_steps / max(self.plant_steps, 1)

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if k != "trajectory"}
        # wall-clock timings would break byte-for-byte reproducibility of the log
        d["diagnostics"] = [{k: v for k, v in x.items() if k != "wall_time"}
                            for x in self.diagnostics]
        d["trajectory"] = np.round(self.trajectory, 6).tolist()
        d["unobserved_fraction"] = self.unobserved_fraction
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        d = json.loads(line)
        d.pop("unobserved_fraction", None)
        d["trajectory"] = np.asarray(d["trajectory"], dtype=float).reshape(-1, 9)
        return cls(**d)

    def write_trajectory_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "V", "v", "r", "X", "Y", "psi", "delta", "f_xt"])
            for row in self.trajectory:
                w.writerow([f"{v:.6f}" for v in row])


def reached_goal(state, goal: Goal) -> bool:
    return (math.hypot(state[3] - goal.x, state[4] - goal.y) < goal.radius
            and math.hypot(state[0], state[1]) < goal.stop_speed)


def run_episode(scenario: Scenario, variant, cfg: EpisodeConfig = EpisodeConfig(),
                seed: int = 0, record_diagnostics: bool = True) -> RunRecord:
    variant = ControllerVariant.parse(variant)
    p = cfg.params
    truth = scenario.truth
    goal = scenario.goal
    ctrl = MppiController(p, cfg.mppi, variant, cfg.weights, cfg.vis, seed=seed)
    state = scenario.start.as_array()
    belief = init_belief(truth.spec, (state[3], state[4]),
                         free_elevation=float(truth.elevation[world_to_cell(state[3:5], truth.spec)]),
                         init_variance=cfg.init_variance, known_radius=cfg.known_radius)
    truth_belief = ElevationBelief.from_truth(truth) if variant is ControllerVariant.PRESCIENT else None
    timeout = scenario.timeout if cfg.timeout is None else cfg.timeout
    dt_plant = cfg.mppi.dt / PLANT_SUBSTEPS
    n_ctrl = int(round(timeout / cfg.mppi.dt))
    rows = [[0.0, *state, 0.0, 0.0]]
    diags = []
    unobserved = plant_steps = 0
    outcome, t_goal, message = None, None, ""
    t = 0.0
    for k in range(n_ctrl):
        if variant is not ControllerVariant.PRESCIENT:
            obs = raycast_3d(truth, state, cfg.sensor)
            belief = fuse_observations(belief, obs, cfg.sensor.gamma_obs)
        try:
            u, diag = ctrl.control_step(state, truth_belief or belief, goal)
        except DynamicsDivergence as exc:
            outcome, message = "diverged", str(exc)
            break
        if record_diagnostics:
            diags.append({"t": round(t, 6), "wall_time": diag.wall_time, "ess": diag.ess,
                          "min_surface": diag.cost_min["S_surface"],
                          "mean_surface": diag.cost_mean["S_surface"],
                          "best_total": diag.best_total})
        for _ in range(PLANT_SUBSTEPS):
            try:
                state = step(state, u, p, dt_plant)
            except DynamicsDivergence as exc:
                outcome, message = "diverged", str(exc)
                break
            t = round(t + dt_plant, 10)
            plant_steps += 1
            rows.append([t, *state, *u])
            cell = world_to_cell(state[3:5], truth.spec)
            if cell[0] < 0 or not belief.observed[cell]:
                unobserved += 1
            if footprint_collides(truth, state[3], state[4], state[5], p.wheelbase, p.tr):
                outcome = "collision"
                break
            if reached_goal(state, goal):
                outcome, t_goal = "success", t
                break
        if outcome is not None:
            break
    if outcome is None:
        d = math.hypot(state[3] - goal.x, state[4] - goal.y)
        outcome = "stop_failure" if d < STOP_FAILURE_RADIUS else "timeout"
    return RunRecord(scenario.name, variant.value, cfg.mppi.J, seed, outcome, t_goal,
                     np.asarray(rows), diags, unobserved, plant_steps, message)


@dataclass
class BatchSummary:
    scenario: str
    variant: str
    J: int
    n_reps: int
    success: int
    collision: int
    stop_failure: int
    timeout: int
    diverged: int
    mean_time: float
    std_time: float

    CSV_COLUMNS = ("scenario", "variant", "J", "n_reps", "success", "collision",
                   "stop_failure", "timeout", "mean_time", "std_time")

    def rate(self, outcome: str) -> float:
        return getattr(self, outcome) / self.n_reps

    def csv_row(self) -> list:
        return [getattr(self, c) for c in self.CSV_COLUMNS]


def summarize(records: list[RunRecord]) -> BatchSummary:
    if not records:
        raise ValueError("no records to summarize")
    r0 = records[0]
    counts = {o: sum(r.outcome == o for r in records) for o in OUTCOMES}
    times = np.array([r.time_to_goal for r in records if r.outcome == "success"], dtype=float)
    mean = float(times.mean()) if len(times) else float("nan")
    std = float(times.std()) if len(times) else float("nan")
    return BatchSummary(r0.scenario, r0.variant, r0.J, len(records), counts["success"],
                        counts["collision"], counts["stop_failure"], counts["timeout"],
                        counts["diverged"], mean, std)


def write_summary_csv(path, summaries: list[BatchSummary]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BatchSummary.CSV_COLUMNS)
        for s in summaries:
            w.writerow(s.csv_row())


def _episode_job(args):
    scenario_name, variant, cfg, seed = args
    return run_episode(SCENARIOS[scenario_name]() if isinstance(scenario_name, str) else scenario_name,
                       variant, cfg, seed)


def n_workers() -> int:
    v = os.environ.get(WORKERS_ENV)
    if v is None:
        return 1
    try:
        n = int(v)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {v!r}") from None
    return max(n, 1) if n > 0 else max(os.cpu_count() or 1, 1)


def run_batch(scenario, variant, cfg: EpisodeConfig = EpisodeConfig(), n_reps: int = 1,
              base_seed: int = 0, workers: int | None = None):
    """Episodes with seeds ``base_seed + rep``. ``scenario`` is a registered name
    or a :class:`Scenario`. Returns ``(records, summary)``."""
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    workers = n_workers() if workers is None else workers
    jobs = [(scenario, variant, cfg, base_seed + r) for r in range(n_reps)]
    if workers > 1 and n_reps > 1:
        with mp.get_context("fork").Pool(min(workers, n_reps)) as pool:
            records = pool.map(_episode_job, jobs)
    else:
        sc = SCENARIOS[scenario]() if isinstance(scenario, str) else scenario
        records = [run_episode(sc, variant, cfg, base_seed + r) for r in range(n_reps)]
    return records, summarize(records)
