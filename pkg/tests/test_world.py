import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from raceavoid.dynamics import VehicleState
from raceavoid.world import (CENTER_RAY, N_RAYS, RAY_OFFSETS, Footprint, SceneGeometry, UnusableScanError,
                             build_intersection, build_racetrack, cast_rays, detect_collision, load_scene,
                             off_track, point_segment_distance, rect_corners, rect_edges, save_scene,
                             shape_scan)

FP = Footprint()
EMPTY = SceneGeometry("empty", np.zeros((0, 2, 2)), [])


def wall_scene(d, half=50.0):
    return SceneGeometry("wall", [[[d, -half], [d, half]]], [])


def test_ray_layout():
    assert len(RAY_OFFSETS) == N_RAYS == 170
    assert RAY_OFFSETS[0] == pytest.approx(-np.pi / 4)
    assert RAY_OFFSETS[-1] == pytest.approx(np.pi / 4)
    assert np.all(np.diff(RAY_OFFSETS) > 0)       # index 0 right, 169 left
    assert np.argmin(np.abs(RAY_OFFSETS)) in (84, 85)
    assert CENTER_RAY == 85


def test_empty_scene_reads_all_ones():
    scan = cast_rays(VehicleState(), EMPTY)
    assert scan.shape == (170,) and np.all(scan == 1.0)


@pytest.mark.parametrize("d", [0.5, 2.0, 7.3])
def test_single_wall_center_ray(d):
    scan = cast_rays(VehicleState(), wall_scene(d))
    # the centre ray sits half an increment left of the heading
    expected = d / np.cos(RAY_OFFSETS[CENTER_RAY]) / 10.0
    assert scan[CENTER_RAY] == pytest.approx(expected, abs=1e-9)
    assert np.allclose(scan, np.minimum(d / np.cos(RAY_OFFSETS) / 10.0, 1.0), atol=1e-9)


def test_ray_order_is_right_to_left():
    # wall only on the left half-plane (y > 0)
    scene = SceneGeometry("w", [[[2.0, 0.05], [2.0, 5.0]]], [])
    scan = cast_rays(VehicleState(), scene)
    assert np.all(scan[:85] == 1.0) and np.all(scan[100:] < 1.0)


@pytest.mark.parametrize("d", [2.0, 4.0, 6.0])
def test_obstacle_block_width(d):
    other = VehicleState(d + FP.half_length, 0.0, 0.0)
    scan = cast_rays(VehicleState(), EMPTY, [(other, FP)])
    hit = np.flatnonzero(scan < 1.0)
    assert np.all(np.diff(hit) == 1)
    inc = RAY_OFFSETS[1] - RAY_OFFSETS[0]
    width = hit.size * inc
    assert abs(width - 2 * np.arctan(FP.half_width / d)) <= inc + 1e-12


@settings(max_examples=50)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-np.pi, np.pi))
def test_cast_rays_rigid_equivariance(tx, ty, rot):
    scene = load_scene("intersection")
    ego = VehicleState(0.3, -4.0, 1.4)
    other = VehicleState(0.5, -1.0, 0.2)
    base = cast_rays(ego, scene, [(other, FP)])
    c, s = np.cos(rot), np.sin(rot)
    R = np.array([[c, -s], [s, c]])

    def move(st_):
        p = R @ [st_.x, st_.y] + [tx, ty]
        return VehicleState(p[0], p[1], st_.yaw + rot)
    segs = scene.boundary_segments @ R.T + [tx, ty]
    moved = SceneGeometry("m", segs, [])
    out = cast_rays(move(ego), moved, [(move(other), FP)])
    assert np.allclose(out, base, atol=1e-9)


def test_collision_examples():
    a = VehicleState(1.0, 2.0, 0.7)
    assert detect_collision(a, FP, a, FP)
    b = VehicleState(0.0, 2 * FP.half_width + 0.01, 0.0)
    assert not detect_collision(VehicleState(), FP, b, FP)


def _inside(points, state, fp):
    c, s = np.cos(state.yaw), np.sin(state.yaw)
    rel = points - [state.x, state.y]
    lx = rel[:, 0] * c + rel[:, 1] * s
    ly = -rel[:, 0] * s + rel[:, 1] * c
    return (np.abs(lx) <= fp.half_length) & (np.abs(ly) <= fp.half_width)


def _oracle_gap(a, b, fp, n=100_000, rng=None):
    """Monte-Carlo overlap area fraction plus a signed clearance estimate from sampled points."""
    rng = rng or np.random.default_rng(0)
    pts = rng.uniform(-1, 1, size=(n, 2)) * [fp.half_length, fp.half_width]
    c, s = np.cos(a.yaw), np.sin(a.yaw)
    world = pts @ np.array([[c, s], [-s, c]]) + [a.x, a.y]
    return bool(np.any(_inside(world, b, fp)))


def test_rotated_corner_touch_matches_sampling_oracle():
    # b rotated 45 deg, its corner pushed 5 mm into / kept 5 mm away from a's front edge
    diag = np.hypot(FP.half_length, FP.half_width)
    corner_angle = np.arctan2(FP.half_width, FP.half_length)
    yaw = np.pi / 4
    # distance from b's centre to its extreme x point when rotated by yaw
    reach = diag * max(abs(np.cos(yaw + corner_angle)), abs(np.cos(yaw - corner_angle)))
    a = VehicleState()
    for gap, expected in ((-0.005, True), (0.005, False)):
        b = VehicleState(FP.half_length + reach + gap, 0.0, yaw)
        assert detect_collision(a, FP, b, FP) is expected
        assert _oracle_gap(b, a, FP) is expected


def test_collision_agrees_with_sampling_oracle_on_random_pairs():
    rng = np.random.default_rng(1)
    checked = 0
    for _ in range(1000):
        a = VehicleState(0, 0, rng.uniform(-np.pi, np.pi))
        b = VehicleState(*rng.uniform(-0.7, 0.7, 2), rng.uniform(-np.pi, np.pi))
        got = detect_collision(a, FP, b, FP)
        # boundary points of a on a fine grid and edge samples give a clearance oracle
        ca, cb = rect_corners(a.as_array(), FP)[0], rect_corners(b.as_array(), FP)[0]
        t = np.linspace(0, 1, 400)[:, None]
        edges_a = np.concatenate([ca[i] + t * (ca[(i + 1) % 4] - ca[i]) for i in range(4)])
        edges_b = np.concatenate([cb[i] + t * (cb[(i + 1) % 4] - cb[i]) for i in range(4)])
        inside = np.any(_inside(edges_a, b, FP)) or np.any(_inside(edges_b, a, FP))
        sep = point_segment_distance(edges_a, rect_edges(b.as_array(), FP)).min()
        if not inside and sep < 1e-3:
            continue                                  # too close to call
        checked += 1
        assert got == inside
    assert checked > 900


def test_collision_symmetric():
    rng = np.random.default_rng(2)
    for _ in range(200):
        a = VehicleState(*rng.uniform(-0.5, 0.5, 2), rng.uniform(-3, 3))
        b = VehicleState(*rng.uniform(-0.5, 0.5, 2), rng.uniform(-3, 3))
        assert detect_collision(a, FP, b, FP) == detect_collision(b, FP, a, FP)


def test_off_track_examples():
    scene = load_scene("intersection")
    assert not off_track(VehicleState(0.0, -4.0), scene)
    assert off_track(VehicleState(1000.0, 0.0), scene)
    assert not off_track(VehicleState(1.2, -4.0), scene)      # on the road edge


def test_bundled_scenes_roundtrip(tmp_path):
    for build in (build_racetrack, build_intersection):
        scene = build()
        save_scene(scene, tmp_path / "s.json")
        back = load_scene(tmp_path / "s.json")
        assert np.array_equal(back.boundary_segments, scene.boundary_segments)
        assert back.spawn_poses == scene.spawn_poses
        assert np.array_equal(load_scene(scene.name).boundary_segments, scene.boundary_segments)


def test_racetrack_properties():
    scene = load_scene("racetrack")
    assert scene.closed and scene.track_centerline is not None
    assert np.all(scene.lane_half_width >= 3 * 2 * FP.half_width)
    pts = scene.track_centerline
    assert np.all(~np.array([off_track(VehicleState(x, y), scene) for x, y in pts]))
    assert scene.project(pts[10]) == pytest.approx(scene.arclength[10], abs=1e-9)


def test_missing_scene_file():
    with pytest.raises(FileNotFoundError, match="nope.json"):
        load_scene("nope.json")


def test_zero_length_segment_rejected():
    with pytest.raises(ValueError):
        SceneGeometry("bad", [[[0, 0], [0, 0]]], [])


# scan shaping -------------------------------------------------------------

def test_shape_identity_on_clean_sector():
    raw = np.zeros(680)
    front = np.linspace(1.0, 9.0, 170)
    idx = (0 - 85 + np.arange(170)) % 680
    raw[:] = 5.0
    raw[idx] = front
    # 680 entries give a 170 wide sector, selected one to one
    out = shape_scan(raw, 0)
    assert np.allclose(out, front / 10.0, atol=1e-12)


def test_shape_dropout_midpoint():
    raw = np.full(680, 2.0)
    h = 300
    raw[h - 1], raw[h], raw[h + 1] = 2.0, 0.0, 2.2
    raw[h + 2] = 2.2
    out = shape_scan(raw, h, max_range=10.0)
    # the sector starts at h-85; the zero at h sits at sector index 85 -> output index 85
    assert out[85] == pytest.approx(0.21, abs=1e-12)


def test_shape_downsample_every_fourth():
    n_total = 2720
    raw = np.linspace(1.0, 9.0, n_total)
    heading = 1360
    out = shape_scan(raw, heading)
    sector = raw[(heading - 340 + np.arange(680)) % n_total]
    assert np.allclose(out, sector[2::4] / 10.0)
    assert np.allclose(out, sector[np.arange(170) * 4 + 2] / 10.0)


def test_shape_spike_removed():
    raw = np.full(720, 3.0)
    raw[360] = 9.5
    out = shape_scan(raw, 360)
    assert np.allclose(out, 0.3)


def test_shape_clockwise_matches_ccw():
    rng = np.random.default_rng(0)
    raw = rng.uniform(1, 9, 1000)
    a = shape_scan(raw, 200)
    b = shape_scan(raw[::-1], 1000 - 1 - 200, ccw=False)
    assert np.array_equal(a, b)


def test_shape_unusable_and_too_short():
    with pytest.raises(UnusableScanError):
        shape_scan(np.zeros(800), 0)
    with pytest.raises(ValueError):
        shape_scan(np.ones(400), 0)


@settings(max_examples=200)
@given(st.integers(680, 4000), st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(-5, 50), st.floats(0, 100))
def test_shape_output_always_valid(n, seed, bad_frac, lo, span):
    rng = np.random.default_rng(seed)
    raw = rng.uniform(lo, lo + span, n)
    bad = rng.random(n) < bad_frac
    raw[bad] = rng.choice([0.0, np.inf, -np.inf, np.nan, -1.0, 1e6], bad.sum())
    try:
        out = shape_scan(raw, int(rng.integers(n)))
    except UnusableScanError:
        return
    assert out.shape == (170,)
    assert np.all((out >= 0) & (out <= 1))
