import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vamppi.cost import Goal
from vamppi.dynamics import VehicleParams
from vamppi.gridmap import ElevationBelief, GridSpec, init_belief
from vamppi.mppi import (ControllerVariant, MppiConfig, MppiController, NoiseBatch,
                         noise_rng, sample_candidates, sample_noise, shift_sequence,
                         update_law, weights_from_costs)

P = VehicleParams()


def test_zero_noise_gives_mean_sequence():
    cfg = MppiConfig(J=16, N=10, sigma_delta=0.0, sigma_force=0.0, zero_mean_fraction=0.0)
    U = np.random.default_rng(0).uniform(-0.2, 0.2, (10, 2))
    V, _ = sample_candidates(U, cfg, 3)
    assert np.all(V == U)


def test_zero_mean_rows_are_centred_on_zero_input():
    cfg = MppiConfig(J=20, N=10, sigma_delta=0.0, sigma_force=0.0, zero_mean_fraction=0.1)
    U = np.full((10, 2), 0.1)
    V, _ = sample_candidates(U, cfg, 3)
    assert np.all(V[-2:] == 0.0) and np.all(V[:-2] == U)


def test_noise_is_deterministic():
    cfg = MppiConfig(J=50, N=12)
    a = sample_noise(cfg, noise_rng(7, 3, 0)).eps
    b = sample_noise(cfg, noise_rng(7, 3, 0)).eps
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sample_noise(cfg, noise_rng(7, 4, 0)).eps)


@pytest.mark.parametrize("rho", [0.0, 0.9])
def test_noise_std_matches_sigma(rho):
    cfg = MppiConfig(J=4000, N=40, noise_corr=rho)
    eps = sample_noise(cfg, noise_rng(1)).eps[1:]
    std = eps.reshape(-1, 2).std(axis=0)
    assert np.all(np.abs(std - cfg.sigma) / cfg.sigma < 0.05)
    assert np.all(sample_noise(cfg, noise_rng(1)).eps[0] == 0)


def test_noise_lag_one_correlation():
    cfg = MppiConfig(J=4000, N=40, noise_corr=0.9)
    e = sample_noise(cfg, noise_rng(2)).eps[1:, :, 0]
    r = np.corrcoef(e[:, :-1].ravel(), e[:, 1:].ravel())[0, 1]
    assert r == pytest.approx(0.9, abs=0.02)


def test_candidates_are_clamped():
    cfg = MppiConfig(J=200, N=10, sigma_delta=2.0, sigma_force=1e5)
    V, _ = sample_candidates(np.zeros((10, 2)), cfg, 0, P)
    lo, hi = P.input_bounds()
    assert np.all(V >= lo) and np.all(V <= hi)
    with pytest.raises(ValueError):
        sample_candidates(np.zeros((9, 2)), cfg, 0)


def test_weights_examples():
    assert np.allclose(weights_from_costs(np.full(7, 3.0), 0.3), 1 / 7)
    c = np.array([0.0, 1.0, 5.0])
    assert np.allclose(weights_from_costs(c, 0.3), weights_from_costs(c + 1e4, 0.3))
    lam = 0.3
    w = weights_from_costs([0.0, lam], lam)
    assert w == pytest.approx([1 / (1 + math.e ** -1), math.e ** -1 / (1 + math.e ** -1)])
    assert w == pytest.approx([0.731, 0.269], abs=1e-3)


@settings(max_examples=100, deadline=None)
@given(arrays(float, st.integers(1, 30), elements=st.floats(0, 1e6)),
       st.floats(1e-3, 100.0))
def test_weights_are_a_distribution_ordered_by_cost(c, lam):
    w = weights_from_costs(c, lam)
    assert np.all(w >= 0) and w.sum() == pytest.approx(1.0)
    assert w[np.argmin(c)] == w.max()
    order = np.argsort(c, kind="stable")
    assert np.all(np.diff(w[order]) <= 1e-15)


def test_weights_reject_bad_input():
    with pytest.raises(ValueError):
        weights_from_costs([1.0, math.nan], 0.3)
    with pytest.raises(ValueError):
        weights_from_costs([math.inf, math.inf], 0.3)
    with pytest.raises(ValueError):
        weights_from_costs([1.0], 0.0)
    assert weights_from_costs([math.inf, 1.0], 0.3)[0] == 0.0


def test_update_uniform_symmetric_noise_keeps_mean():
    rng = np.random.default_rng(0)
    half = rng.normal(size=(50, 10, 2))
    noise = NoiseBatch(np.concatenate([half, -half]))
    U = rng.normal(size=(10, 2)) * 0.1
    assert np.allclose(update_law(U, noise, np.full(100, 0.01)), U)


def test_update_one_hot_selects_candidate():
    cfg = MppiConfig(J=30, N=8, zero_mean_fraction=0.0)
    U = np.zeros((8, 2))
    V, noise = sample_candidates(U, cfg, 5)
    w = np.zeros(30)
    w[11] = 1.0
    assert np.allclose(update_law(U, noise, w), V[11])


def test_shift_sequence():
    U = np.arange(10.0).reshape(5, 2)
    S = shift_sequence(U)
    assert np.array_equal(S[:4], U[1:]) and np.array_equal(S[4], U[4])


def test_variant_parse():
    assert ControllerVariant.parse("deterministic") is ControllerVariant.DETERMINISTIC
    assert ControllerVariant.parse("va") is ControllerVariant.VISIBILITY_AWARE
    with pytest.raises(ValueError):
        ControllerVariant.parse("nope")


def _flat_belief(var=0.0):
    spec = GridSpec(40.0, 0.2)
    return ElevationBelief(spec, np.zeros(spec.shape), np.full(spec.shape, var),
                           np.ones(spec.shape, bool))


SMALL = MppiConfig(J=64, N=20)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_prescient_accelerates_toward_goal(seed):
    ctrl = MppiController(P, MppiConfig(), "prescient", seed=seed)
    u, diag = ctrl.control_step(np.array([0, 0, 0, 5.0, 20.0, 0]), _flat_belief(),
                                Goal(35.0, 20.0))
    assert u[1] > 0
    assert diag.ess >= 1.0 and diag.wall_time > 0


def test_det_never_runs_visibility_update():
    b = init_belief(GridSpec(40.0, 0.2), (5.0, 20.0), 0.0, 3.0, 3.0)
    ctrl = MppiController(P, SMALL, "det", seed=0)
    for _ in range(3):
        _, diag = ctrl.control_step(np.array([3, 0, 0, 5.0, 20.0, 0]), b, Goal(35.0, 20.0))
        assert diag.cost_min["S_surface"] == 0.0
    assert ctrl.visibility_calls == 0


def test_va_reports_surface_diagnostics():
    b = init_belief(GridSpec(40.0, 0.2), (5.0, 20.0), 0.0, 3.0, 3.0)
    ctrl = MppiController(P, SMALL, "va", seed=0)
    _, diag = ctrl.control_step(np.array([3, 0, 0, 5.0, 20.0, 0]), b, Goal(35.0, 20.0))
    assert ctrl.visibility_calls == 1
    assert 0.0 <= diag.cost_min["S_surface"] <= diag.cost_mean["S_surface"]
    assert diag.cost_mean["S_surface"] > 0.0


def test_controller_is_reproducible():
    b = init_belief(GridSpec(40.0, 0.2), (5.0, 20.0), 0.0, 3.0, 3.0)
    x = np.array([3, 0, 0, 5.0, 20.0, 0])
    runs = []
    for _ in range(2):
        ctrl = MppiController(P, SMALL, "va", seed=4)
        runs.append([ctrl.control_step(x, b, Goal(35.0, 20.0))[0] for _ in range(2)])
    assert np.array_equal(np.array(runs[0]), np.array(runs[1]))


def test_config_validation():
    with pytest.raises(ValueError):
        MppiConfig(J=0)
    with pytest.raises(ValueError):
        MppiConfig(lam=0.0)
    with pytest.raises(ValueError):
        MppiConfig(noise_corr=1.0)
