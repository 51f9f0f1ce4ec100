import json

import numpy as np
import pytest

from handfield import scenes, skeleton as sk


# --- capsule geometry -------------------------------------------------------


def test_point_segment_distance_cases():
    a = np.array([[0.0, 0, 0]])
    b = np.array([[10.0, 0, 0]])
    pts = np.array(
        [
            [5.0, 3.0, 0.0],   # perpendicular to the interior
            [-4.0, 0.0, 3.0],  # beyond the a endpoint
            [13.0, 4.0, 0.0],  # beyond the b endpoint
            [7.0, 0.0, 0.0],   # on the segment
        ]
    )
    d = scenes.point_segment_distance(pts, a, b)[:, 0]
    assert d[0] == 3.0
    assert d[1] == 5.0
    assert d[2] == 5.0
    assert d[3] == 0.0


def test_segment_segment_distance_cases():
    # skew perpendicular pair: closest points at segment interiors
    d = scenes.segment_segment_distance(
        np.array([[0.0, 0, 0]]), np.array([[10.0, 0, 0]]),
        np.array([[5.0, -3, 4]]), np.array([[5.0, 3, 4]]),
    )[0, 0]
    assert abs(d - 4.0) < 1e-12
    # parallel with endpoint gap
    d = scenes.segment_segment_distance(
        np.array([[0.0, 0, 0]]), np.array([[10.0, 0, 0]]),
        np.array([[14.0, 3, 0]]), np.array([[24.0, 3, 0]]),
    )[0, 0]
    assert abs(d - 5.0) < 1e-12
    # intersecting in the plane
    d = scenes.segment_segment_distance(
        np.array([[0.0, 0, 0]]), np.array([[10.0, 0, 0]]),
        np.array([[5.0, -2, 0]]), np.array([[5.0, 2, 0]]),
    )[0, 0]
    assert d == 0.0


def test_oracle_trivial_and_far_points(sample_scene_7):
    s = sample_scene_7
    o = scenes.oracle_occupancy(s, s.keypoints.left[0])
    assert o[0] == 1.0  # left wrist is on a left-hand capsule axis
    far = np.full(3, 1e6)
    assert tuple(scenes.oracle_occupancy(s, far)) == (0.0, 0.0)


def test_oracle_just_outside_radius(sample_scene_7):
    """Points offset radius + 0.1 mm perpendicular to a bone axis are unoccupied."""
    s = sample_scene_7
    hand = s.hand("left")
    a, b = hand.segments()
    mid = 0.5 * (a + b)
    axis = b - a
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    # build a unit perpendicular from the least-aligned coordinate axis
    probe = np.zeros_like(mid)
    for i in range(len(mid)):
        e = np.eye(3)[np.argmin(np.abs(axis[i]))]
        perp = e - axis[i] * (e @ axis[i])
        perp /= np.linalg.norm(perp)
        probe[i] = mid[i] + (hand.radii[i] + 0.1) * perp
    occ = scenes.oracle_occupancy_batch(s, probe)
    d_all = scenes.point_segment_distance(probe, a, b)
    # only rows whose probe stayed outside every other bone's capsule are conclusive
    clear = np.all(d_all > hand.radii[None, :] + 0.05, axis=1)
    assert clear.any()
    assert np.all(occ[clear, 0] == 0.0)


def test_oracle_rigid_invariance(sample_scene_7):
    s = sample_scene_7
    rng = np.random.default_rng(4)
    pts = rng.uniform(-150, 150, (500, 3)) + s.keypoints.stacked().mean(0)
    base = scenes.oracle_occupancy_batch(s, pts)
    a = 0.61
    R = np.array(
        [[np.cos(a), 0, np.sin(a)], [0, 1, 0], [-np.sin(a), 0, np.cos(a)]]
    )
    t = np.array([30.0, -55.0, 12.0])
    moved = scenes.SceneSample(
        image=s.image,
        keypoints=sk.TwoHandKeypoints.from_stacked(s.keypoints.stacked() @ R.T + t),
        left_radii=s.left_radii,
        right_radii=s.right_radii,
        camera=s.camera,
        seed=s.seed,
    )
    assert np.array_equal(scenes.oracle_occupancy_batch(moved, pts @ R.T + t), base)


def test_capsule_hand_radius_validation(sample_scene_7):
    s = sample_scene_7
    lengths = sk.bone_lengths(s.keypoints.left)
    bad = s.left_radii.copy()
    bad[0] = lengths[0]  # radius as long as the bone
    with pytest.raises(ValueError):
        scenes.CapsuleHand(s.keypoints.left, bad)


# --- camera -----------------------------------------------------------------


def test_camera_centered_and_projection():
    cam = scenes.CameraSpec.centered(128, 128, 4.5)
    assert np.allclose(cam.origin[:2], [-4.5 * 127 / 2, -4.5 * 127 / 2])
    assert cam.forward is not None
    # image-plane origin lands at pixel (0, 0)
    assert np.allclose(scenes.project(cam, cam.origin[None]), [[0.0, 0.0]])
    shifted = cam.origin + 4.5 * cam.right
    assert np.allclose(scenes.project(cam, shifted[None]), [[1.0, 0.0]], atol=1e-12)


def test_project_lift_round_trip():
    cam = scenes.CameraSpec.centered(128, 128, 4.5)
    rng = np.random.default_rng(8)
    x = rng.uniform(-200, 200, (100, 3))
    uv = scenes.project(cam, x)
    depth = (x - cam.origin) @ cam.forward
    back = scenes.lift(cam, uv, depth)
    assert np.max(np.abs(back - x)) <= 1e-9


def test_camera_dict_round_trip():
    cam = scenes.CameraSpec.centered(96, 64, 2.0)
    back = scenes.CameraSpec.from_dict(cam.to_dict())
    assert np.array_equal(back.origin, cam.origin)
    assert np.array_equal(back.right, cam.right)
    assert back.width == 96 and back.height == 64


# --- rendering --------------------------------------------------------------


def test_render_empty_scene_black():
    cam = scenes.CameraSpec.centered(32, 32, 4.5)
    img = scenes.render(cam, None, None)
    assert img.shape == (32, 32, 3)
    assert np.all(img == 0)


def test_render_channel_semantics(sample_scene_7):
    s = sample_scene_7
    left = s.hand("left")
    right = s.hand("right")
    only_left = scenes.render(s.camera, left, None)
    only_right = scenes.render(s.camera, None, right)
    assert only_left[..., 0].max() > 0 and only_left[..., 2].max() == 0
    assert only_right[..., 2].max() > 0 and only_right[..., 0].max() == 0
    # pixel at the right wrist projection sees the right hand
    u, v = scenes.project(s.camera, s.keypoints.right[0][None])[0]
    assert s.image[int(round(v)), int(round(u)), 2] > 0
    # rays that miss every capsule stay exactly black
    assert np.all(s.image[np.all(s.image == 0, axis=2)] == 0)


def test_render_mirror_equality_exact(sample_scene_7):
    s = sample_scene_7
    left_m = scenes.CapsuleHand(sk.mirror_hand(s.keypoints.right), s.right_radii)
    right_m = scenes.CapsuleHand(sk.mirror_hand(s.keypoints.left), s.left_radii)
    rendered = scenes.render(s.camera, left_m, right_m)
    assert np.array_equal(rendered, scenes.mirror_image(s.image))


def test_mirror_image_involution(sample_scene_7):
    img = sample_scene_7.image
    assert np.array_equal(scenes.mirror_image(scenes.mirror_image(img)), img)


# --- scene sampling ---------------------------------------------------------


def test_sample_scene_deterministic(gen_config):
    a = scenes.sample_scene(12, gen_config)
    b = scenes.sample_scene(12, gen_config)
    assert np.array_equal(a.keypoints.stacked(), b.keypoints.stacked())
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.left_radii, b.left_radii)
    c = scenes.sample_scene(13, gen_config)
    assert not np.array_equal(a.keypoints.stacked(), c.keypoints.stacked())


def test_sample_scene_hands_disjoint_and_in_frame(gen_config):
    for seed in range(6):
        s = scenes.sample_scene(seed, gen_config)
        uv = scenes.project(s.camera, s.keypoints.stacked())
        assert np.all(uv[:, 0] >= 0) and np.all(uv[:, 0] <= s.camera.width - 1)
        assert np.all(uv[:, 1] >= 0) and np.all(uv[:, 1] <= s.camera.height - 1)
        la, lb = s.hand("left").segments()
        ra, rb = s.hand("right").segments()
        gaps = scenes.segment_segment_distance(la, lb, ra, rb)
        margin = s.left_radii[:, None] + s.right_radii[None, :]
        assert np.all(gaps - margin >= gen_config.clearance_mm - 1e-9)


def test_sample_scene_no_overlap_probes(gen_config):
    s = scenes.sample_scene(3, gen_config)
    rng = np.random.default_rng(0)
    bbox = scenes.scene_bbox(s)
    pts = rng.uniform(bbox[0], bbox[1], (100_000, 3))
    occ = scenes.oracle_occupancy_batch(s, pts)
    assert not np.any((occ[:, 0] > 0) & (occ[:, 1] > 0))


def test_scene_bbox_contains_capsules(sample_scene_7):
    s = sample_scene_7
    bbox = scenes.scene_bbox(s, pad_mm=20.0)
    pts = scenes.sample_on_capsules(
        [s.hand("left"), s.hand("right")], 2000, np.random.default_rng(1)
    )
    assert np.all(pts >= bbox[0]) and np.all(pts <= bbox[1])


# --- query sampling ---------------------------------------------------------


def test_surface_samples_on_capsules(sample_scene_7):
    s = sample_scene_7
    hands = [s.hand("left"), s.hand("right")]
    pts = scenes.sample_on_capsules(hands, 3000, np.random.default_rng(5))
    best = np.full(len(pts), np.inf)
    for hand in hands:
        a, b = hand.segments()
        d = scenes.point_segment_distance(pts, a, b)
        best = np.minimum(best, np.abs(d - hand.radii[None, :]).min(axis=1))
    assert best.max() <= 1e-9


def test_training_queries_contract(sample_scene_7):
    qb = scenes.sample_training_queries(sample_scene_7, 100, 100, 4.0, seed=2)
    assert qb.points.shape == (200, 3)
    assert qb.labels.shape == (200, 2)
    relabeled = scenes.oracle_occupancy_batch(sample_scene_7, qb.points)
    assert np.array_equal(qb.labels, relabeled)
    again = scenes.sample_training_queries(sample_scene_7, 100, 100, 4.0, seed=2)
    assert np.array_equal(qb.points, again.points)


def test_training_queries_sigma_zero_on_surface(sample_scene_7):
    s = sample_scene_7
    qb = scenes.sample_training_queries(s, 10, 500, 0.0, seed=3)
    surf = qb.points[10:]
    best = np.full(len(surf), np.inf)
    for side in ("left", "right"):
        hand = s.hand(side)
        a, b = hand.segments()
        d = scenes.point_segment_distance(surf, a, b)
        best = np.minimum(best, np.abs(d - hand.radii[None, :]).min(axis=1))
    assert best.max() <= 1e-9


# --- dataset I/O ------------------------------------------------------------


def test_sample_round_trip(tmp_path, sample_scene_7):
    scenes.save_sample(sample_scene_7, tmp_path / "s0")
    back = scenes.load_sample(tmp_path / "s0")
    assert np.array_equal(back.keypoints.stacked(), sample_scene_7.keypoints.stacked())
    assert np.array_equal(back.left_radii, sample_scene_7.left_radii)
    assert np.array_equal(back.right_radii, sample_scene_7.right_radii)
    assert back.seed == sample_scene_7.seed
    assert np.max(np.abs(back.image - sample_scene_7.image)) <= 1 / 255 + 1e-9
    assert np.array_equal(back.camera.origin, sample_scene_7.camera.origin)


def test_dataset_round_trip_and_manifest(tmp_path, gen_config):
    samples = [scenes.sample_scene(s, gen_config) for s in (0, 1)]
    scenes.save_dataset(samples, tmp_path / "ds", generation_config={"note": 1})
    manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert manifest["samples"] == ["sample_0000", "sample_0001"]
    assert manifest["version"] == 1
    back = scenes.load_dataset(tmp_path / "ds")
    assert len(back) == 2
    for s, b in zip(samples, back):
        assert np.array_equal(s.keypoints.stacked(), b.keypoints.stacked())


def test_load_sample_missing_meta(tmp_path, sample_scene_7):
    scenes.save_sample(sample_scene_7, tmp_path / "s1")
    (tmp_path / "s1" / "meta.json").unlink()
    with pytest.raises(scenes.DatasetError, match="meta.json"):
        scenes.load_sample(tmp_path / "s1")


def test_save_twice_byte_identical(tmp_path, sample_scene_7):
    scenes.save_sample(sample_scene_7, tmp_path / "a")
    scenes.save_sample(sample_scene_7, tmp_path / "b")
    for name in ("image.png", "keypoints.json", "geometry.json", "meta.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_generation_budget_error():
    cfg = scenes.GenerationConfig(max_tries=1, clearance_mm=500.0)
    with pytest.raises(scenes.SceneGenerationError):
        scenes.sample_scene(0, cfg)
