import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vamppi.gridmap import ElevationBelief, GridSpec, world_to_cell_array
from vamppi.visibility import (VisibilityConfig, decay_variance, escaped_rays,
                               footprint_variance, gaussian_kernel, predicted_visibility,
                               rollout_uncertainty_sequence, splat)

CFG = VisibilityConfig()


def _pose_traj(poses):
    t = np.zeros((len(poses), 6))
    t[:, 3:6] = poses
    return t


def test_kernel_center_and_normalization():
    raw = gaussian_kernel(9, 1.0, normalize=False)
    assert raw[4, 4] == pytest.approx(1 / (2 * math.pi), abs=1e-5)
    assert raw[4, 4] == pytest.approx(0.15915, abs=1e-5)
    k = gaussian_kernel(9, 1.0)
    assert abs(k.sum() - 1.0) < 1e-12
    assert np.allclose(k, k[::-1, :]) and np.allclose(k, k[:, ::-1]) and np.allclose(k, k.T)
    with pytest.raises(ValueError):
        gaussian_kernel(8, 1.0)


def test_point_spacing():
    assert CFG.point_spacing == pytest.approx(23 / 29)
    assert CFG.point_spacing == pytest.approx(0.793, abs=1e-3)


def test_flat_map_counts_every_point():
    spec = GridSpec(60.0, 0.2)
    counts = predicted_visibility(_pose_traj([(10.0, 30.0, 0.3)]), np.zeros(spec.shape),
                                  spec, CFG)
    assert counts.sum() == pytest.approx(600 * CFG.count_value)


def test_wall_blocks_rays_beyond_it():
    spec = GridSpec(60.0, 0.2)
    mean = np.zeros(spec.shape)
    x0, y0 = 10.0, 30.0
    # arc wall from 10 m, thicker than the point spacing so no sample skips it
    ii, jj = np.meshgrid(np.arange(300), np.arange(300), indexing="ij")
    r = np.hypot(ii * 0.2 + 0.1 - x0, jj * 0.2 + 0.1 - y0)
    mean[(r > 9.9) & (r < 11.0)] = 2.0
    counts = predicted_visibility(_pose_traj([(x0, y0, 0.0)]), mean, spec, CFG)
    assert counts[r > 11.1].sum() == 0.0
    assert counts[r < 9.9].sum() > 0.0
    # a low wall does not block
    mean[mean > 0] = 0.5
    counts = predicted_visibility(_pose_traj([(x0, y0, 0.0)]), mean, spec, CFG)
    assert counts[r > 11.1].sum() > 0.0


def test_off_map_pose_casts_nothing():
    spec = GridSpec(10.0, 0.2)
    counts = predicted_visibility(_pose_traj([(-5.0, 5.0, 0.0)]), np.zeros(spec.shape),
                                  spec, CFG)
    assert counts.sum() == 0.0


def test_splat_zero_mass_and_linearity():
    k = gaussian_kernel()
    z = np.zeros((30, 30))
    assert np.all(splat(z, k) == 0)
    a = z.copy()
    a[15, 15] = 7.0
    assert splat(a, k).sum() == pytest.approx(7.0)
    b = z.copy()
    b[13, 17] = 2.0
    assert np.allclose(splat(a + b, k), splat(a, k) + splat(b, k))


def test_decay_examples():
    v = np.full((5, 5), 3.0)
    assert np.array_equal(decay_variance(v, np.zeros_like(v), 0.3), v)
    assert np.allclose(decay_variance(v, np.ones_like(v), 0.3), 3.0 * 0.7408, atol=1e-4)
    with pytest.raises(ValueError):
        decay_variance(v, -np.ones_like(v), 0.3)


@settings(max_examples=50, deadline=None)
@given(arrays(float, 8, elements=st.floats(0, 20)), arrays(float, 8, elements=st.floats(0, 20)),
       arrays(float, 8, elements=st.floats(0, 5)))
def test_decay_monotone_in_counts(ca, cb, v):
    hi, lo = np.maximum(ca, cb), np.minimum(ca, cb)
    assert np.all(decay_variance(v, hi, 0.3) <= decay_variance(v, lo, 0.3))
    assert np.all(decay_variance(v, hi, 0.3) <= v)


def _belief(side=40.0, var=3.0):
    spec = GridSpec(side, 0.2)
    return ElevationBelief(spec, np.zeros(spec.shape), np.full(spec.shape, var))


def test_sequence_step_zero_is_belief_variance():
    b = _belief(20.0)
    seq = rollout_uncertainty_sequence(_pose_traj([(2, 10, 0)] * 3), b, CFG)
    assert np.array_equal(seq[0], b.variance)


def test_sequence_stationary_is_monotone():
    b = _belief(20.0)
    seq = rollout_uncertainty_sequence(_pose_traj([(2, 10, 0)] * 5), b, CFG)
    assert np.all(np.diff(seq, axis=0) <= 0)
    assert seq[-1].min() < seq[0].min()


def test_straight_rollout_lowers_variance_ahead():
    b = _belief(30.0)
    poses = [(2 + 0.8 * i, 15, 0) for i in range(8)]
    seq = rollout_uncertainty_sequence(_pose_traj(poses), b, CFG)
    for i in range(1, 8):
        # the vehicle's own step-i location lies ahead of earlier poses' rays
        c = (int((poses[i][0] + 2.5) / 0.2), int(poses[i][1] / 0.2))
        assert seq[i][c] < b.variance[c]


def test_footprint_query_matches_dense_sequence():
    b = _belief(30.0)
    b.mean[100:104, 60:90] = 2.0              # an occluder in the way
    rng = np.random.default_rng(0)
    N = 6
    trajs = np.zeros((2, N + 1, 6))
    for j in range(2):
        psi = rng.uniform(-0.4, 0.4)
        s = np.arange(N + 1) * 1.2
        trajs[j, :, 3] = 3 + s * math.cos(psi)
        trajs[j, :, 4] = 15 + s * math.sin(psi)
        trajs[j, :, 5] = psi
    fp = trajs[:, :, None, 3:5] + rng.uniform(-3, 6, (2, N + 1, 5, 2))
    got = footprint_variance(trajs, fp, b, CFG)
    for j in range(2):
        seq = rollout_uncertainty_sequence(trajs[j], b, CFG)
        for i in range(N + 1):
            a, c, ok = world_to_cell_array(fp[j, i], b.spec)
            assert np.allclose(got[j, i][ok], seq[i][a[ok], c[ok]], rtol=1e-10, atol=1e-12)


def test_escaped_rays_zero_on_flat_map():
    spec = GridSpec(40.0, 0.2)
    esc, tot = escaped_rays(_pose_traj([(5, 20, 0), (8, 20, 0.2)]), np.zeros(spec.shape),
                            spec, CFG)
    assert esc == 0 and tot == 40


def test_config_validation():
    with pytest.raises(ValueError):
        VisibilityConfig(kernel_size=4)
    with pytest.raises(ValueError):
        VisibilityConfig(gamma=0.0)
    with pytest.raises(ValueError):
        VisibilityConfig(ray_start=30.0)
