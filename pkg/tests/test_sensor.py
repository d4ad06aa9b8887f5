import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vamppi.gridmap import (ElevationBelief, GridSpec, GroundTruthMap, init_belief,
                            world_to_cell)
from vamppi.sensor import (ObservationSet, SensorSpec, frustum_mask, fuse_observations,
                           line_of_sight_blocked, raycast_3d)


def _flat(side=40.0):
    spec = GridSpec(side, 0.2)
    return GroundTruthMap(spec, np.zeros(spec.shape))


def _pose(x, y, psi=0.0):
    return np.array([0.0, 0.0, 0.0, x, y, psi])


def _bearings(obs, x, y):
    c = obs.cells * 0.2 + 0.1
    return np.degrees(np.arctan2(c[:, 1] - y, c[:, 0] - x)), np.hypot(c[:, 0] - x, c[:, 1] - y)


def test_flat_hits_form_72_degree_wedge():
    truth = _flat()
    obs = raycast_3d(truth, _pose(5.0, 20.0), SensorSpec())
    assert len(obs) > 1000
    # hit points lie on the rays, so their bearings span the horizontal FOV
    d = obs.hit_points[:, :2] - [5.0, 20.0]
    b = np.degrees(np.arctan2(d[:, 1], d[:, 0]))
    r = np.hypot(d[:, 0], d[:, 1])
    width = b[r > 1.0].max() - b[r > 1.0].min()
    assert abs(width - 72.0) < 0.5
    assert np.all(r <= 25.0 + 1e-9)


def test_flat_wedge_is_contiguous_along_each_bearing():
    truth = _flat()
    obs = raycast_3d(truth, _pose(5.0, 20.0), SensorSpec())
    seen = np.zeros(truth.spec.shape, bool)
    seen[obs.cells[:, 0], obs.cells[:, 1]] = True
    # along the heading every cell from the blind spot out to max range is hit
    j = world_to_cell((5.0, 20.05), truth.spec)[1]
    i0 = world_to_cell((5.0 + 1.5 / math.tan(math.radians(45)) + 0.3, 0), truth.spec)[0]
    i1 = world_to_cell((5.0 + 24.5, 0), truth.spec)[0]
    assert seen[i0:i1 + 1, j].all()


def test_tall_wall_shadows_everything_behind():
    truth = _flat()
    e = truth.elevation
    i_w = world_to_cell((15.0, 0), truth.spec)[0]
    e[i_w, 70:131] = 2.0                       # y 14..26
    obs = raycast_3d(truth, _pose(5.0, 20.0), SensorSpec())
    b, r = _bearings(obs, 5.0, 20.0)
    shadow = (np.abs(b) < math.degrees(math.atan(5.5 / 10.2))) & (obs.cells[:, 0] > i_w)
    assert not shadow.any()
    assert (obs.cells[:, 0] == i_w).any()


def test_low_wall_shadow_matches_tan_geometry():
    truth = _flat()
    e = truth.elevation
    i_w = world_to_cell((10.0, 0), truth.spec)[0]
    e[i_w, 50:151] = 1.0
    obs = raycast_3d(truth, _pose(5.0, 20.0), SensorSpec())
    cam_h = 1.5
    near_edge = i_w * 0.2 - 5.0
    far_edge = near_edge + 0.2
    # a ray grazing the far top edge of the wall returns to the ground here
    reappear = far_edge * cam_h / (cam_h - 1.0)
    on_axis = np.abs(obs.cells[:, 1] * 0.2 + 0.1 - 20.0) < 0.5
    dx = obs.cells[:, 0] * 0.2 + 0.1 - 5.0
    ground = obs.elevations == 0.0
    in_shadow = on_axis & ground & (dx > far_edge + 0.2) & (dx < reappear - 0.3)
    assert not in_shadow.any()
    assert (on_axis & ground & (dx > reappear + 0.3)).any()


def test_hits_have_clear_line_of_sight():
    spec = GridSpec(12.0, 0.2)
    rng = np.random.default_rng(5)
    elev = np.zeros(spec.shape)
    for _ in range(6):
        i, j = rng.integers(15, 55, 2)
        elev[i:i + 4, j:j + 3] = rng.uniform(0.3, 2.5)
    truth = GroundTruthMap(spec, elev)
    obs = raycast_3d(truth, _pose(1.0, 6.0), SensorSpec(max_range=10.0))
    pick = rng.choice(len(obs), size=min(60, len(obs)), replace=False)
    for k in pick:
        assert not line_of_sight_blocked(elev, spec, obs.camera, obs.hit_points[k],
                                         tuple(obs.cells[k]), eps=1e-6)


def test_hits_are_inside_frustum_mask_and_counted():
    truth = _flat()
    obs = raycast_3d(truth, _pose(20.0, 20.0, 1.0), SensorSpec())
    assert obs.frustum_mask[obs.cells[:, 0], obs.cells[:, 1]].all()
    assert np.all(obs.events() > 0)
    assert len(np.unique(obs.cells, axis=0)) == len(obs)


def test_raycast_off_map_returns_empty():
    obs = raycast_3d(_flat(10.0), _pose(-5.0, 5.0), SensorSpec())
    assert len(obs) == 0 and not obs.frustum_mask.any()


def test_frustum_mask_matches_brute_force():
    spec = GridSpec(10.0, 0.2)
    m = frustum_mask(spec, 5.0, 5.0, 0.5, 72.0, 4.0)
    for i in range(0, 50, 3):
        for j in range(0, 50, 3):
            cx, cy = i * 0.2 + 0.1, j * 0.2 + 0.1
            rr = math.hypot(cx - 5, cy - 5)
            bb = math.atan2(cy - 5, cx - 5) - 0.5
            bb = (bb + math.pi) % (2 * math.pi) - math.pi
            assert m[i, j] == (rr <= 4.0 and abs(bb) <= math.radians(36))


def test_sensor_spec_validation():
    with pytest.raises(ValueError):
        SensorSpec(fov=0.0)
    with pytest.raises(ValueError):
        SensorSpec(max_range=-1.0)
    with pytest.raises(ValueError):
        SensorSpec(azimuth_rays=1)


def _single_obs(spec, cell, z=0.0):
    return ObservationSet(np.array([cell]), np.array([z]), np.zeros(spec.shape, bool),
                          np.zeros((1, 3)))


def test_fuse_once_decays_variance():
    spec = GridSpec(2.0, 0.2)
    b = init_belief(spec, (1.0, 1.0), 0.0, 3.0, 0.0)
    out = fuse_observations(b, _single_obs(spec, (2, 2), 0.4), 0.3)
    assert out.variance[2, 2] == pytest.approx(3.0 * math.exp(-0.3))
    assert out.variance[2, 2] == pytest.approx(2.222, abs=1e-3)
    assert out.mean[2, 2] == 0.4
    assert out.observed[2, 2]
    assert out.variance[5, 5] == 3.0


def test_fuse_k_times_closed_form():
    spec = GridSpec(2.0, 0.2)
    b = init_belief(spec, (1.0, 1.0), 0.0, 3.0, 0.0)
    prev = 3.0
    for k in range(1, 8):
        b = fuse_observations(b, _single_obs(spec, (1, 3)), 0.3)
        assert b.variance[1, 3] == pytest.approx(3.0 * math.exp(-0.3 * k))
        assert b.variance[1, 3] < prev
        prev = b.variance[1, 3]


def test_fuse_uses_event_counts():
    spec = GridSpec(2.0, 0.2)
    b = init_belief(spec, (1.0, 1.0), 0.0, 3.0, 0.0)
    obs = _single_obs(spec, (1, 3))
    obs.counts = np.array([4.0])
    out = fuse_observations(b, obs, 0.3)
    assert out.variance[1, 3] == pytest.approx(3.0 * math.exp(-1.2))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 50.0), st.floats(0.0, 5.0))
def test_fuse_variance_never_increases(events, v0):
    spec = GridSpec(1.0, 0.2)
    b = ElevationBelief(spec, np.zeros(spec.shape), np.full(spec.shape, v0))
    obs = _single_obs(spec, (2, 2))
    obs.counts = np.array([events])
    out = fuse_observations(b, obs, 0.3)
    assert np.all(out.variance <= b.variance)
    assert np.all(out.variance >= 0)


def test_fuse_inpaints_occluded_frustum_cells_from_this_frame_only():
    spec = GridSpec(2.0, 0.2)
    b = init_belief(spec, (1.0, 1.0), 0.0, 3.0, 0.0)
    obs = _single_obs(spec, (3, 3), 1.0)
    obs.frustum_mask[3, 4] = True
    out = fuse_observations(b, obs, 0.3)
    assert out.mean[3, 4] == 1.0
    assert not out.observed[3, 4]
    assert out.variance[3, 4] == 3.0
    # next frame without that cell in view: the fill reverts to free ground
    empty = ObservationSet(np.empty((0, 2), np.int64), np.empty(0),
                           np.zeros(spec.shape, bool), np.empty((0, 3)))
    out2 = fuse_observations(out, empty, 0.3)
    assert out2.mean[3, 4] == 0.0
    assert out2.mean[3, 3] == 1.0
