"""Sampling-based MPC: perturb the mean control sequence, roll out, cost,
exponentially weight and update."""
from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .cost import COMPONENTS, CostWeights, Goal, footprint_points, total_cost
from .dynamics import DynamicLimits, VehicleParams, rollout_batch
from .gridmap import ElevationBelief
from .visibility import VisibilityConfig, footprint_variance


@dataclass(frozen=True)
class MppiConfig:
    J: int = 400
    N: int = 40
    dt: float = 0.1
    lam: float = 0.3
    sigma_delta: float = 0.2
    sigma_force: float = 800.0
    n_opt_iters: int = 1
    # share of candidates drawn around the zero input instead of the mean
    # sequence; lets the optimiser escape input saturation (e.g. full braking)
    zero_mean_fraction: float = 0.1
    # AR(1) coefficient of the noise along the horizon; 0 gives white noise.
    # The stationary std stays sigma, so only the smoothness changes.
    noise_corr: float = 0.9

    def __post_init__(self):
        if self.J < 1 or self.N < 1 or self.n_opt_iters < 1:
            raise ValueError("J, N and n_opt_iters must be >= 1")
        if self.lam <= 0 or self.dt <= 0:
            raise ValueError("lam and dt must be positive")
        if self.sigma_delta < 0 or self.sigma_force < 0:
            raise ValueError("noise std must be >= 0")
        if not 0 <= self.zero_mean_fraction < 1:
            raise ValueError("zero_mean_fraction must lie in [0, 1)")
        if not 0 <= self.noise_corr < 1:
            raise ValueError("noise_corr must lie in [0, 1)")

    @property
    def n_zero_mean(self) -> int:
        return int(self.zero_mean_fraction * self.J) if self.J > 1 else 0

    @property
    def sigma(self) -> np.ndarray:
        return np.array([self.sigma_delta, self.sigma_force])


class ControllerVariant(str, enum.Enum):
    PRESCIENT = "prescient"
    DETERMINISTIC = "det"
    VISIBILITY_AWARE = "va"

    @classmethod
    def parse(cls, s) -> "ControllerVariant":
        if isinstance(s, cls):
            return s
        aliases = {"deterministic": "det", "visibility_aware": "va"}
        try:
            return cls(aliases.get(str(s), str(s)))
        except ValueError:
            raise ValueError(f"unknown controller variant {s!r}") from None


@dataclass
class NoiseBatch:
    eps: np.ndarray        # (J, N, 2), unclamped; row 0 is all zeros

    @property
    def J(self) -> int:
        return self.eps.shape[0]


def noise_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))


def sample_noise(cfg: MppiConfig, rng: np.random.Generator, U: np.ndarray | None = None) -> NoiseBatch:
    """Gaussian perturbations (AR(1) along the horizon); row 0 is zero. The last ``cfg.n_zero_mean`` rows
    are re-centred on the zero input (``eps = noise - U``) when ``U`` is given."""
    eps = rng.standard_normal((cfg.J, cfg.N, 2))
    rho = cfg.noise_corr
    if rho > 0:
        scale = math.sqrt(1 - rho * rho)
        for t in range(1, cfg.N):
            eps[:, t] = rho * eps[:, t - 1] + scale * eps[:, t]
    eps *= cfg.sigma
    eps[0] = 0.0
    k = cfg.n_zero_mean
    if U is not None and k:
        eps[cfg.J - k:] -= U
    return NoiseBatch(eps)


def sample_candidates(U: np.ndarray, cfg: MppiConfig, seed, params: VehicleParams | None = None):
    """Candidates ``clamp(U + eps)`` and their noise. ``seed`` is an int or a Generator."""
    U = np.asarray(U, dtype=float)
    if U.shape != (cfg.N, 2):
        raise ValueError(f"mean sequence must have shape {(cfg.N, 2)}, got {U.shape}")
    rng = seed if isinstance(seed, np.random.Generator) else noise_rng(seed)
    noise = sample_noise(cfg, rng, U)
    V = U[None] + noise.eps
    if params is not None:
        lo, hi = params.input_bounds()
        V = np.clip(V, lo, hi)
    return V, noise


def weights_from_costs(costs, lam: float) -> np.ndarray:
    """Softmax of ``-costs / lam`` with the minimum cost subtracted first."""
    costs = np.asarray(costs, dtype=float)
    if lam <= 0:
        raise ValueError("lam must be positive")
    if np.any(np.isnan(costs)):
        raise ValueError("costs contain NaN")
    finite = np.isfinite(costs)
    if not finite.any():
        raise ValueError("all rollout costs are infinite")
    e = np.where(finite, np.exp(-(costs - costs[finite].min()) / lam), 0.0)
    return e / e.sum()


def update_law(U, noise: NoiseBatch, w, params: VehicleParams | None = None) -> np.ndarray:
    """``clamp(U + sum_j w_j eps_j)``."""
    U = np.asarray(U, dtype=float) + np.tensordot(np.asarray(w), noise.eps, axes=1)
    if params is not None:
        lo, hi = params.input_bounds()
        U = np.clip(U, lo, hi)
    return U


def shift_sequence(U: np.ndarray) -> np.ndarray:
    """Drop the applied input and repeat the last one."""
    return np.concatenate([U[1:], U[-1:]], axis=0)


@dataclass
class StepDiagnostics:
    wall_time: float
    ess: float
    cost_min: dict
    cost_mean: dict
    best_total: float


@dataclass
class MppiController:
    params: VehicleParams = field(default_factory=VehicleParams)
    cfg: MppiConfig = field(default_factory=MppiConfig)
    variant: ControllerVariant = ControllerVariant.VISIBILITY_AWARE
    weights: CostWeights = field(default_factory=CostWeights)
    vis: VisibilityConfig = field(default_factory=VisibilityConfig)
    limits: DynamicLimits | None = None
    seed: int = 0

    def __post_init__(self):
        self.variant = ControllerVariant.parse(self.variant)
        if self.limits is None:
            self.limits = DynamicLimits.from_params(self.params)
        self.U = np.zeros((self.cfg.N, 2))
        self.n_steps = 0
        self._scratch = None
        # set to count visibility-update calls in tests
        self.visibility_calls = 0

    def reset(self, U0: np.ndarray | None = None) -> None:
        self.U = np.zeros((self.cfg.N, 2)) if U0 is None else np.array(U0, dtype=float)
        self.n_steps = 0

    def evaluate(self, state, belief: ElevationBelief, goal: Goal, V: np.ndarray,
                 xi: np.ndarray):
        """Roll out candidate controls ``V`` and cost them under this variant's belief policy."""
        trajs = rollout_batch(state, V, self.params, self.cfg.dt)
        variances = None
        if self.variant is ControllerVariant.VISIBILITY_AWARE:
            if self._scratch is None or self._scratch.shape != belief.spec.shape:
                self._scratch = np.zeros(belief.spec.shape)
            fp = footprint_points(trajs, self.params, self.weights.footprint_points,
                                  self.weights.side_points, self.weights.footprint_margin)
            variances = footprint_variance(trajs, fp, belief, self.vis, self._scratch)
            self.visibility_calls += 1
        else:
            belief = replace(belief, variance=np.zeros(belief.spec.shape))
        bd = total_cost(trajs, goal, self.weights, self.limits, self.params, belief,
                        variances, self.cfg.dt, xi=xi)
        return trajs, bd

    def control_step(self, state, belief: ElevationBelief, goal: Goal):
        """Optimise the mean sequence and return ``(u0, diagnostics)``.

        For the prescient variant ``belief`` should be the ground truth
        (:meth:`ElevationBelief.from_truth`); the other variants pass the
        online belief.
        """
        t0 = time.perf_counter()
        state = np.asarray(state, dtype=float)
        xi = noise_rng(self.seed, self.n_steps, 1 << 20).standard_normal(
            self.weights.n_elev_samples)
        for it in range(self.cfg.n_opt_iters):
            rng = noise_rng(self.seed, self.n_steps, it)
            V, noise = sample_candidates(self.U, self.cfg, rng, self.params)
            _, bd = self.evaluate(state, belief, goal, V, xi)
            costs = bd.total
            if not np.all(np.isfinite(costs)):
                bad = int(np.argmin(np.isfinite(costs)))
                raise FloatingPointError(f"rollout {bad} has non-finite cost {costs[bad]}")
            w = weights_from_costs(costs, self.cfg.lam)
            self.U = update_law(self.U, noise, w, self.params)
        u0 = self.U[0].copy()
        self.U = shift_sequence(self.U)
        self.n_steps += 1
        diag = StepDiagnostics(
            wall_time=time.perf_counter() - t0,
            ess=float(1.0 / np.sum(w * w)),
            cost_min={c: float(np.min(getattr(bd, c))) for c in COMPONENTS},
            cost_mean={c: float(np.mean(getattr(bd, c))) for c in COMPONENTS},
            best_total=float(costs.min()),
        )
        return u0, diag
