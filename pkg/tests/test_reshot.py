import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgmapper import reshot as rs
from sgmapper.geometry import PointCloud

from conftest import box_cloud


def sphere_points(n, radius=1.0, center=(0, 0, 0), seed=0):
    r = np.random.default_rng(seed)
    v = r.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(center, float) + radius * v


def raycast_visible(points, camera, center, radius):
    """A point is visible when the segment from the camera hits the sphere first at that point."""
    cam = np.asarray(camera, float)
    d = points - cam
    dist = np.linalg.norm(d, axis=1)
    d = d / dist[:, None]
    oc = cam - np.asarray(center, float)
    b = (d * oc).sum(1)
    c = (oc * oc).sum() - radius * radius
    t_hit = -b - np.sqrt(np.maximum(b * b - c, 0.0))
    return t_hit >= dist - 1e-6


@pytest.mark.parametrize("distance", [2.0, 3.0, 6.0])
def test_visible_ratio_matches_raycast_on_sphere(distance):
    pts = sphere_points(3000)
    cam = np.array([0.0, 0.0, distance])
    oracle = raycast_visible(pts, cam, (0, 0, 0), 1.0).mean()
    # closed form for a sphere: the visible cap is (1 - r/D) / 2 of the surface
    assert oracle == pytest.approx((1 - 1 / distance) / 2, abs=0.03)
    got = rs.visible_ratio(PointCloud(pts), cam, gamma=100.0)
    assert abs(got - oracle) <= 0.1


def test_hpr_small_inputs_all_visible():
    assert rs.hpr_visible(np.eye(3), [5, 5, 5]).all()


def test_visible_ratio_rejects_camera_inside():
    with pytest.raises(ValueError, match="inside"):
        rs.visible_ratio(PointCloud(sphere_points(100)), [0, 0, 0])


def test_hemisphere_zenith_first_and_above_center():
    pos = rs.sample_hemisphere([1, 2, 3], 2.0, 64)
    np.testing.assert_allclose(pos[0], [1, 2, 5])
    np.testing.assert_allclose(np.linalg.norm(pos - [1, 2, 3], axis=1), 2.0)
    assert np.all(pos[:, 2] > 3.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 200), st.floats(0.1, 10))
def test_hemisphere_count_and_radius(n, radius):
    pos = rs.sample_hemisphere([0, 0, 0], radius, n, g=(0, -1, 0))
    assert pos.shape == (n, 3)
    np.testing.assert_allclose(np.linalg.norm(pos, axis=1), radius, rtol=1e-12)
    assert np.all(pos[:, 1] > 0)


CUBE = box_cloud((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5), 400)
G = (0.0, 0.0, -1.0)


def score(position, prior, s_vis=0.5, alpha=0.2, beta=0.2):
    return rs.view_scores(CUBE, position, G, prior, alpha, beta, center=(0, 0, 0), s_vis=s_vis)


def test_s_up_parallel_and_orthogonal():
    assert score([0, 0, 3], [1, 0, 0]).s_up == 0.0
    assert score([3, 0, 0], [1, 0, 0]).s_up == 1.0


@pytest.mark.parametrize("prior, want", [((0, 0, 1), 0.0), ((1, 0, 0), 0.5), ((0, 0, -1), 1.0)])
def test_s_prior_values(prior, want):
    # from (0,0,3) the camera looks along -z at the centre
    assert score([0, 0, 3], prior).s_prior == want


def test_zero_prior_is_neutral():
    assert score([0, 0, 3], [0, 0, 0]).s_prior == 0.5


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 0.49), st.floats(0, 0.49),
       st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.2, 1)))
def test_s_view_is_weighted_sum(s_vis, alpha, beta, direction):
    pos = 3 * np.array(direction) / np.linalg.norm(direction)
    c = score(pos, [0.3, 0.1, 0.4], s_vis=s_vis, alpha=alpha, beta=beta)
    want = (1 - alpha - beta) * c.s_vis + alpha * c.s_up + beta * c.s_prior
    assert c.s_view == pytest.approx(want, abs=1e-9)
    for part in (c.s_up, c.s_prior, c.s_view):
        assert 0.0 <= part <= 1.0


def test_default_weights_example():
    c = score([3, 0, 0], [-1, 0, 0], s_vis=0.5)
    assert c.s_view == pytest.approx(0.6 * 0.5 + 0.2 * 1.0 + 0.2 * 1.0, abs=1e-9)


def test_best_candidate_tie_breaks_on_index():
    a = rs.ViewCandidate(3, np.zeros(3), np.ones(3), 0, 0, 0, 0.7)
    b = rs.ViewCandidate(1, np.zeros(3), np.ones(3), 0, 0, 0, 0.7)
    assert rs.best_candidate([a, b]).index == 1


def test_settings_validation():
    with pytest.raises(ValueError):
        rs.RenderSettings(alpha=0.6, beta=0.6)
    with pytest.raises(ValueError):
        rs.RenderSettings(candidates=0)


def test_score_candidates_prefers_side_views_of_flat_object():
    flat = box_cloud((-1, -1, 0), (1, 1, 0.02), 800)
    s = rs.RenderSettings(candidates=32, alpha=0.2, beta=0.0)
    cands = rs.score_candidates(flat, [0, -3, 1], s)
    assert len(cands) == 32
    best = rs.best_candidate(cands)
    assert best.s_view == max(c.s_view for c in cands)


def test_render_projects_object_into_frame():
    cloud = box_cloud((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5), 2000, color=(1.0, 0.0, 0.0))
    s = rs.RenderSettings(width=64, height=48, splat_radius=1)
    cand = rs.view_scores(cloud, [3, 0, 0], G, [1, 0, 0], 0.2, 0.2, s_vis=1.0)
    shot = rs.render_point_splat(cloud, cand, s, object_id=7)
    assert shot.pixels.shape == (48, 64, 3)
    assert shot.foreground.any()
    assert tuple(shot.pixels[0, 0]) == (255, 255, 255)
    assert np.all(shot.pixels[shot.foreground] == [255, 0, 0])
    # fitted focal length keeps the object off the border
    ys, xs = np.nonzero(shot.foreground)
    assert xs.min() > 0 and xs.max() < 63 and ys.min() > 0 and ys.max() < 47


def test_render_z_buffer_keeps_nearest():
    near = PointCloud([[0, 0, 1.0]], [[0, 1, 0]])
    far = PointCloud([[0, 0, 0.0]], [[1, 0, 0]])
    cloud = PointCloud.concat([far, near, PointCloud([[0.2, 0.2, 0.5]], [[0, 0, 1]])])
    s = rs.RenderSettings(width=32, height=32, splat_radius=0)
    cand = rs.ViewCandidate(0, np.array([0, 0, 3.0]), np.array([0, 0, -1.0]), 1, 0, 0.5, 0.5)
    shot = rs.render_point_splat(cloud, cand, s)
    assert tuple(shot.pixels[15, 15]) == (0, 255, 0) or tuple(shot.pixels[16, 16]) == (0, 255, 0)
    assert not np.any(np.all(shot.pixels == [255, 0, 0], axis=-1))


def test_render_point_object_uses_fov():
    cloud = PointCloud([[0, 0, 0]], [[0, 0, 1.0]])
    s = rs.RenderSettings(width=9, height=9, splat_radius=0)
    cand = rs.ViewCandidate(0, np.array([0, 0, 3.0]), np.array([0, 0, -1.0]), 1, 0, 0.5, 0.5)
    shot = rs.render_point_splat(cloud, cand, s)
    assert tuple(shot.pixels[4, 4]) == (0, 0, 255)


def test_reshoot_and_write(tmp_path):
    from sgmapper.fusion import new_global
    from sgmapper.ingest import LocalObject, Mask

    cloud = box_cloud((0, 0, 0), (0.4, 0.4, 0.4), 500, color=(0.2, 0.4, 0.6))
    lo = LocalObject(np.array([1.0, 0]), cloud, Mask(np.ones((2, 2), bool)), None, 0, np.array([2.0, 0, 1]))
    obj = new_global(lo, 5)
    shots, cands = rs.reshoot_object(obj, rs.RenderSettings(width=32, height=32, candidates=16), ranks=2)
    assert len(shots) == 2 and len(cands) == 16
    assert shots[0].candidate.s_view >= shots[1].candidate.s_view
    path = rs.write_reshot(tmp_path, shots[0], 0, cands)
    assert path.name == "rank0.png" and (path.parent / "rank0.json").is_file()
