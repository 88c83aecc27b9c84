import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from demoprog.errors import BehindCamera, ConfigError, DegenerateHull, FormatError, InvalidScene
from demoprog.geometry import (
    ABOVE,
    EDGE,
    LEFT,
    NONE,
    CameraModel,
    CuboidPose,
    Scene,
    SceneGenConfig,
    convex_hull_area,
    ground_truth_relations,
    hidden_candidates,
    load_scene,
    project_cuboid,
    project_scene,
    randomize_scene,
    save_scene,
    scene_from_dict,
    scene_to_dict,
)


def homogeneous_projection(camera, points):
    """Independent pinhole oracle: P = K [R | t] applied to homogeneous points."""
    fx, fy = camera.focal
    cx, cy = camera.principal
    K = np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1]])
    P = K @ np.hstack([camera.rotation, camera.translation[:, None]])
    X = np.hstack([points, np.ones((len(points), 1))])
    x = X @ P.T
    return x[:, :2] / x[:, 2:]


def shoelace_hull_area(points):
    """Monotone-chain hull plus shoelace, written independently of shapely."""
    pts = sorted(set(map(tuple, np.asarray(points, float))))

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    return 0.5 * abs(sum(hull[i][0] * hull[i - 1][1] - hull[i - 1][0] * hull[i][1] for i in range(len(hull))))


def two_cubes(a, b, yaw_a=0.0, yaw_b=0.0):
    return Scene((CuboidPose(a, yaw_a, EDGE, 0), CuboidPose(b, yaw_b, EDGE, 1)))


# --- hull -----------------------------------------------------------------


def test_hull_unit_square():
    assert convex_hull_area([(0, 0), (1, 0), (1, 1), (0, 1)]) == pytest.approx(1.0)


def test_hull_examples():
    sq = [(0, 0), (10, 0), (10, 10), (0, 10)]
    assert convex_hull_area(sq) == pytest.approx(100)
    assert convex_hull_area(sq + [(5, 5)]) == pytest.approx(100)
    assert convex_hull_area([(0, 0), (4, 0), (0, 3)]) == pytest.approx(6)


@pytest.mark.parametrize("pts", [[(0, 0), (1, 1), (2, 2)], [(1, 1), (1, 1), (1, 1)], [(0, 0), (1, 0)]])
def test_hull_degenerate(pts):
    with pytest.raises(DegenerateHull):
        convex_hull_area(pts)


points = st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=3, max_size=12)


@given(points, st.tuples(st.floats(-100, 100), st.floats(-100, 100)))
def test_hull_monotone_and_matches_oracle(pts, extra):
    try:
        before = convex_hull_area(pts)
    except DegenerateHull:
        assume(False)
    after = convex_hull_area(pts + [extra])
    assert after >= before - 1e-9
    assert before == pytest.approx(shoelace_hull_area(pts), rel=1e-9, abs=1e-9)


# --- projection -----------------------------------------------------------


def test_on_axis_cube_front_face():
    cam = CameraModel(np.eye(3), np.zeros(3))
    scene = Scene((CuboidPose((0, 0, 1.0), 0.0, 0.05, 0),))
    p = project_cuboid(scene, cam, 0)
    front = p.vertices[[i for i in range(8) if (i & 1) == 0]]  # z sign bit clear: nearer face
    off = 400 * 0.025 / 0.975
    assert off == pytest.approx(10.26, abs=0.01)
    np.testing.assert_allclose(np.sort(np.unique(np.round(front, 9))), [200 - off, 200 + off], atol=1e-9)
    np.testing.assert_allclose(p.vertices, homogeneous_projection(cam, scene.cuboids[0].corners()), atol=1e-9)


def test_single_cube_oblique_view():
    scene = Scene((CuboidPose((0, 0, EDGE / 2), 0.3, EDGE, 2),))
    cam = CameraModel.look_at((0.3, -0.5, 0.4), (0, 0, 0.02))
    p = project_cuboid(scene, cam, 0)
    assert len(hidden_candidates(scene.cuboids[0], cam)) == 1
    assert p.hidden_index == hidden_candidates(scene.cuboids[0], cam)[0]
    assert not p.occluded_by_other.any()
    assert p.hull_area > 0
    assert len(p.visible_vertices()) == 7
    assert p.hidden_index not in p.visible_order()


def test_behind_camera():
    cam = CameraModel.look_at((0, -0.5, 0.3), (0, 0, 0))
    scene = Scene((CuboidPose((0, -1.5, EDGE / 2)),))
    with pytest.raises(BehindCamera):
        project_cuboid(scene, cam, 0)


def test_rotation_must_be_orthonormal():
    with pytest.raises(ConfigError):
        CameraModel(np.diag([1.0, 1.0, 1.1]), np.zeros(3))


def test_stack_occludes_lower_vertices():
    scene = Scene((CuboidPose((0, 0, EDGE / 2), 0, EDGE, 0), CuboidPose((0, 0, 1.5 * EDGE), 0, EDGE, 1)))
    cam = CameraModel.look_at((0.05, -0.6, 0.5), (0, 0, 0.03))
    lower, upper = project_scene(scene, cam)
    assert lower.occluded_by_other.any()
    assert all(lower.occluder[i] == 1 for i in np.flatnonzero(lower.occluded_by_other))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_projection_matches_homogeneous_oracle(seed):
    scene, cam = randomize_scene(np.random.default_rng(seed), SceneGenConfig(n_min=1, n_max=5))
    for k, p in enumerate(project_scene(scene, cam)):
        ref = homogeneous_projection(cam, scene.cuboids[k].corners())
        assert np.abs(p.vertices - ref).max() < 1e-6


@settings(max_examples=200, deadline=None)
@given(
    yaw=st.floats(-math.pi, math.pi),
    elevation=st.floats(5.5, 84.5),
    azimuth=st.floats(-180, 180),
    distance=st.floats(0.2, 2.0),
)
def test_exactly_one_hidden_vertex(yaw, elevation, azimuth, distance):
    # generic views: avoid face-on alignment, keep the eye outside every face slab
    rel = (math.degrees(math.radians(azimuth) - yaw) % 90.0)
    assume(2.0 < rel < 88.0)
    cube = CuboidPose((0, 0, EDGE / 2), yaw, EDGE, 0)
    el, az = math.radians(elevation), math.radians(azimuth)
    eye = np.array(cube.center) + distance * np.array(
        [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
    )
    local = cube.rotation.T @ (eye - np.array(cube.center))
    assume(np.all(np.abs(local) > EDGE / 2 + 1e-6))
    cam = CameraModel.look_at(eye, cube.center)
    assert len(hidden_candidates(cube, cam)) == 1


# --- relations ------------------------------------------------------------


def test_exact_stacking_is_above():
    rel = ground_truth_relations(two_cubes((0, 0, 0.075), (0, 0, 0.025)))
    expected = np.zeros((2, 2, 3), dtype=np.uint8)
    expected[0, 1, ABOVE] = 1
    expected[1, 0, NONE] = 1
    np.testing.assert_array_equal(rel, expected)


def test_side_contact_is_left():
    rel = ground_truth_relations(two_cubes((-0.05, 0, 0.025), (0, 0, 0.025)))
    assert rel[0, 1, LEFT] == 1 and rel[1, 0, LEFT] == 0
    assert rel[:, :, ABOVE].sum() == 0


def test_far_apart_is_none():
    rel = ground_truth_relations(two_cubes((-0.5, 0, 0.025), (0.5, 0, 0.025)))
    assert rel[:, :, :2].sum() == 0
    assert rel[0, 1, NONE] == rel[1, 0, NONE] == 1
    assert rel[0, 0].sum() == rel[1, 1].sum() == 0


def test_interpenetration_rejected():
    with pytest.raises(InvalidScene):
        two_cubes((0, 0, 0.025), (0.01, 0, 0.025))
    with pytest.raises(InvalidScene):
        Scene((CuboidPose((0, 0, 0.025), 0, EDGE, 1), CuboidPose((1, 0, 0.025), 0, EDGE, 1)))


def test_pyramid_top_rests_on_both():
    scene = Scene(
        (
            CuboidPose((-0.025, 0, 0.025), 0, EDGE, 0),
            CuboidPose((0.025, 0, 0.025), 0, EDGE, 1),
            CuboidPose((0, 0, 0.075), 0, EDGE, 2),
        )
    )
    rel = ground_truth_relations(scene)
    assert rel[2, 0, ABOVE] == rel[2, 1, ABOVE] == 1
    assert rel[0, 1, LEFT] == 1
    assert rel[:, :, ABOVE].sum() == 2 and rel[:, :, LEFT].sum() == 1


# --- generation -----------------------------------------------------------


def test_generation_deterministic():
    a = randomize_scene(np.random.default_rng(42))
    b = randomize_scene(np.random.default_rng(42))
    assert scene_to_dict(*a) == scene_to_dict(*b)


def test_pyramid_config():
    cfg = SceneGenConfig(n_min=3, n_max=3, mix={"pyramid": 1.0})
    for seed in range(5):
        scene, _ = randomize_scene(np.random.default_rng(seed), cfg)
        rel = ground_truth_relations(scene)
        assert rel[:, :, ABOVE].sum() == 2
        assert rel[:, :, LEFT].sum() == 1


def test_stack_of_four():
    cfg = SceneGenConfig(n_min=4, n_max=4, mix={"stack": 1.0})
    scene, _ = randomize_scene(np.random.default_rng(7), cfg)
    rel = ground_truth_relations(scene)
    above = rel[:, :, ABOVE]
    assert above.sum() == 3 and rel[:, :, LEFT].sum() == 0
    # a single chain: one bottom (supports nothing), one top (nothing on it)
    assert (above.sum(axis=1) == 0).sum() == 1 and (above.sum(axis=0) == 0).sum() == 1


def test_infeasible_config():
    with pytest.raises(ConfigError):
        randomize_scene(np.random.default_rng(0), SceneGenConfig(n_min=9, n_max=9))
    with pytest.raises(ConfigError):
        randomize_scene(np.random.default_rng(0), SceneGenConfig(mix={"spiral": 1.0}))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_generated_scenes_valid_and_antisymmetric(seed):
    scene, cam = randomize_scene(np.random.default_rng(seed), SceneGenConfig(n_min=2, n_max=6))
    rel = ground_truth_relations(scene)
    for ch in (ABOVE, LEFT):
        assert not np.any(rel[:, :, ch] & rel[:, :, ch].T)
    off = ~np.eye(scene.n, dtype=bool)
    assert np.all(rel[off].sum(axis=1) >= 1)
    assert np.all(rel[off][:, NONE] == 1 - np.maximum(rel[off][:, ABOVE], rel[off][:, LEFT]))
    centers = cam.project(np.array([c.center for c in scene.cuboids]))
    assert np.all((centers >= 0) & (centers <= 400))


def test_scene_file_roundtrip(tmp_path):
    scene, cam = randomize_scene(np.random.default_rng(3))
    save_scene(tmp_path / "s.json", scene, cam)
    s2, c2 = load_scene(tmp_path / "s.json")
    assert scene_to_dict(s2, c2) == scene_to_dict(scene, cam)


def test_scene_file_errors(tmp_path):
    d = scene_to_dict(*randomize_scene(np.random.default_rng(3)))
    with pytest.raises(FormatError):
        scene_from_dict({**d, "version": 99})
    with pytest.raises(FormatError):
        scene_from_dict({k: v for k, v in d.items() if k != "cuboids"})
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(FormatError):
        load_scene(tmp_path / "bad.json")
