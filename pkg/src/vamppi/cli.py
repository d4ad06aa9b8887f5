"""Command-line entry point: ``vamppi run | figures | validate``."""
from __future__ import annotations

import argparse
import configparser
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import (VARIANT_CHOICES, ConfigError, RunConfig, dump_config, load_config,
                     with_overrides)
from .sim import RunRecord, load_scenario, run_batch, summarize, write_summary_csv

log = logging.getLogger("vamppi")


def _triple(text: str) -> tuple[float, float, float]:
    parts = [float(v) for v in text.replace(",", " ").split()]
    if len(parts) != 3:
        raise ValueError(f"expected 'x y psi', got {text!r}")
    return tuple(parts)


def cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = with_overrides(cfg, scenario=args.scenario, variant=args.variant, n_reps=args.reps,
                         base_seed=args.seed, out=args.out, samples=args.samples)
    start = _triple(args.start) if args.start else None
    goal = _triple(args.goal) if args.goal else None
    scenario = load_scenario(cfg.scenario, start, goal)
    out = Path(cfg.out)
    (out / "trajectories").mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))
    ep_cfg = cfg.episode()
    summaries = []
    with open(out / "episodes.jsonl", "w") as log_fh, open(out / "timing.csv", "w", newline="") as t_fh:
        tw = csv.writer(t_fh)
        tw.writerow(["variant", "seed", "step", "wall_time"])
        for variant in cfg.variants():
            records, summary = run_batch(scenario, variant, ep_cfg, cfg.n_reps, cfg.base_seed)
            summaries.append(summary)
            for r in records:
                log_fh.write(r.to_json() + "\n")
                r.write_trajectory_csv(out / "trajectories" /
                                       f"{r.scenario}_{r.variant}_J{r.J}_s{r.seed}.csv")
                for k, d in enumerate(r.diagnostics):
                    tw.writerow([r.variant, r.seed, k, f"{d.get('wall_time', float('nan')):.6f}"])
    write_summary_csv(out / "summary.csv", summaries)
    print(f"{'scenario':10s} {'variant':9s} {'J':>5s} {'reps':>4s} {'succ':>4s} {'coll':>4s} "
          f"{'stop':>4s} {'tout':>4s} {'mean_t':>7s} {'std_t':>6s}")
    for s in summaries:
        print(f"{s.scenario:10s} {s.variant:9s} {s.J:5d} {s.n_reps:4d} {s.success:4d} "
              f"{s.collision:4d} {s.stop_failure:4d} {s.timeout:4d} {s.mean_time:7.2f} "
              f"{s.std_time:6.2f}")
    print(f"wrote {out / 'summary.csv'}")
    return 0


def _read_logs(paths) -> list[RunRecord]:
    records = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            p = p / "episodes.jsonl"
        if not p.exists():
            raise FileNotFoundError(f"episode log not found: {p}")
        records += [RunRecord.from_json(line) for line in p.read_text().splitlines() if line.strip()]
    return records


def cmd_figures(args) -> int:
    records = _read_logs(args.logs)
    if not records:
        print("error: episode logs are empty", file=sys.stderr)
        return 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    groups: dict[tuple, list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.scenario, r.variant, r.J), []).append(r)
    with open(out / "failures.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "variant", "J", "n_reps", "collision_rate", "failure_rate"])
        for key in sorted(groups):
            s = summarize(groups[key])
            w.writerow([*key, s.n_reps, f"{s.collision / s.n_reps:.4f}",
                        f"{1 - s.success / s.n_reps:.4f}"])
    with open(out / "time_to_goal.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "variant", "J", "seed", "time_to_goal"])
        for r in records:
            if r.outcome == "success":
                w.writerow([r.scenario, r.variant, r.J, r.seed, f"{r.time_to_goal:.4f}"])
    with open(out / "trajectories.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "variant", "J", "seed", "outcome", "t", "X", "Y", "speed"])
        for r in records:
            for row in r.trajectory:
                w.writerow([r.scenario, r.variant, r.J, r.seed, r.outcome, f"{row[0]:.4f}",
                            f"{row[4]:.4f}", f"{row[5]:.4f}", f"{math.hypot(row[1], row[2]):.4f}"])
    with open(out / "min_surface_cost.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "variant", "J", "seed", "t", "min_surface"])
        for r in records:
            for d in r.diagnostics:
                w.writerow([r.scenario, r.variant, r.J, r.seed, f"{d['t']:.4f}",
                            f"{d['min_surface']:.6g}"])
    print(f"wrote plot data for {len(records)} episodes to {out}")
    return 0


def _raw_visibility(path) -> dict:
    """Visibility values straight from the file, so invalid ones can be tested
    by the invariant checks instead of being rejected at parse time."""
    raw = {"gamma": 0.3, "kernel_sigma": 1.0, "kernel_size": 9}
    if path:
        cp = configparser.ConfigParser(interpolation=None)
        cp.read(path)
        if cp.has_section("visibility"):
            for k in raw:
                if cp.has_option("visibility", k):
                    raw[k] = type(raw[k])(cp.get("visibility", k))
    return raw


def validate_invariants(gamma: float = 0.3, kernel_sigma: float = 1.0, kernel_size: int = 9,
                        seed: int = 0) -> list[tuple[str, bool, str]]:
    from .dynamics import VehicleParams, rollout
    from .gridmap import GridSpec, GroundTruthMap
    from .mppi import weights_from_costs
    from .sensor import SensorSpec, line_of_sight_blocked, raycast_3d
    from .visibility import decay_variance, gaussian_kernel

    rng = np.random.default_rng(seed)
    results = []

    def check(name, fn):
        try:
            ok, msg = fn()
        except Exception as exc:  # an invariant that cannot even run has failed
            ok, msg = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), msg))

    def kernel():
        k = gaussian_kernel(kernel_size, kernel_sigma)
        err = abs(k.sum() - 1.0)
        return err < 1e-12, f"|sum - 1| = {err:.2e}"

    def softmax():
        c = rng.normal(0, 5, 64)
        w = weights_from_costs(c, 1.0)
        w2 = weights_from_costs(c + 123.4, 1.0)
        ok = abs(w.sum() - 1) < 1e-12 and np.allclose(w, w2, rtol=0, atol=1e-15)
        return ok, f"sum - 1 = {w.sum() - 1:.1e}, max shift diff = {np.abs(w - w2).max():.1e}"

    def decay():
        var = rng.uniform(0.1, 3.0, (20, 20))
        cb = rng.uniform(0, 5, (20, 20))
        ca = cb + rng.uniform(0, 5, (20, 20))
        va, vb = decay_variance(var, ca, gamma), decay_variance(var, cb, gamma)
        ok = np.all(va <= vb) and np.all(vb <= var)
        return ok, "more counts never raise variance" if ok else \
            f"variance increased with counts (gamma = {gamma})"

    def mirror():
        p = VehicleParams()
        u = np.column_stack([rng.uniform(-0.3, 0.3, 30), rng.uniform(0, 3000, 30)])
        x0 = np.array([5.0, 0, 0, 0, 0, 0])
        a = rollout(x0, u, p, 0.1)
        b = rollout(x0, u * [-1, 1], p, 0.1)
        err = np.abs(a * [1, -1, -1, 1, -1, -1] - b).max()
        return err < 1e-9, f"max mirror error {err:.1e}"

    def occlusion():
        spec = GridSpec(10.0, 0.2)
        elev = np.where(rng.random(spec.shape) < 0.08, rng.uniform(0.5, 3.0, spec.shape), 0.0)
        truth = GroundTruthMap(spec, elev)
        sensor = SensorSpec(max_range=9.0)
        pose = np.array([0, 0, 0, 0.3 + rng.random(), 5.0 + rng.random() - 0.5, rng.uniform(-0.5, 0.5)])
        obs = raycast_3d(truth, pose, sensor)
        bad = sum(line_of_sight_blocked(elev, spec, obs.camera, pt, cell)
                  for cell, pt in zip(obs.cells, obs.hit_points))
        return bad == 0, f"{len(obs)} hits, {bad} false visibles"

    for name, fn in (("kernel_normalization", kernel), ("softmax_invariance", softmax),
                     ("decay_monotonicity", decay), ("dynamics_mirror_symmetry", mirror),
                     ("occlusion_oracle_50x50", occlusion)):
        check(name, fn)
    return results


def cmd_validate(args) -> int:
    raw = _raw_visibility(args.config)
    results = validate_invariants(**raw)
    for name, ok, msg in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {msg}")
    failed = [n for n, ok, _ in results if not ok]
    if failed:
        print(f"invariant failure: {', '.join(failed)}", file=sys.stderr)
        return 1
    if args.config:
        load_config(args.config)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vamppi", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a batch of closed-loop episodes")
    run.add_argument("--scenario", help="alleyway, offroad, or a grid map file")
    run.add_argument("--variant", choices=VARIANT_CHOICES)
    run.add_argument("--samples", type=int, help="MPPI sample count J")
    run.add_argument("--reps", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--config", help="INI file; flags override its values")
    run.add_argument("--out", help="output directory")
    run.add_argument("--start", help="'x y psi' for map-file scenarios")
    run.add_argument("--goal", help="'x y psi' for map-file scenarios")
    run.set_defaults(func=cmd_run)

    fig = sub.add_parser("figures", help="emit plot data from episode logs")
    fig.add_argument("logs", nargs="+", help="episodes.jsonl files or run directories")
    fig.add_argument("--out", default="figures")
    fig.set_defaults(func=cmd_figures)

    val = sub.add_parser("validate", help="run the fast invariant suite")
    val.add_argument("--config")
    val.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
