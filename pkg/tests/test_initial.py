import numpy as np
import pytest
import torch

from conftest import finite_difference_check
from handfield import initial, primitives as pr, scenes, skeleton as sk


@pytest.fixture(scope="module")
def model():
    return initial.build_model(initial.InitialConfig(), seed=0)


@pytest.fixture(scope="module")
def tiny_model():
    cfg = initial.InitialConfig(
        d=8,
        c_phi=4,
        c_omega=4,
        part_width=8,
        part_layers=3,
        cond_hidden=8,
        dropout=0.0,
        image_height=16,
        image_width=16,
        patch=8,
        heads=2,
    )
    return initial.build_model(cfg, seed=1)


def _zero_heads(model):
    """Zero every part head; returns the per-part bias tensor for editing."""
    with torch.no_grad():
        model.parts.weights[-1].zero_()
        model.parts.biases[-1].zero_()
    return model.parts.biases[-1]


def test_range_and_shape(model, sample_scene_7):
    rng = np.random.default_rng(0)
    x = rng.uniform(-150, 150, (64, 3))
    out = initial.eval_two_hands(model, x, sample_scene_7.image, sample_scene_7.keypoints)
    assert out.shape == (64, 2)
    assert 0 < out.min() and out.max() < 1


def test_constant_field_with_zeroed_heads(sample_scene_7):
    m = initial.build_model(initial.InitialConfig(), seed=3)
    biases = _zero_heads(m)
    beta = 0.37
    with torch.no_grad():
        biases.fill_(beta)
    x = np.random.default_rng(1).uniform(-150, 150, (32, 3))
    out = initial.eval_two_hands(m, x, sample_scene_7.image, sample_scene_7.keypoints)
    expected = 1.0 / (1.0 + np.exp(-beta))
    assert np.max(np.abs(out - expected)) < 1e-6
    assert np.array_equal(out[:, 0], out[:, 1])  # both columns identical


def test_shape_feature_zeroed_attention_is_position_encoding(tiny_model, ):
    m = tiny_model
    with torch.no_grad():
        m.attn.v_proj.weight.zero_()
        m.attn.v_proj.bias.zero_()
        m.attn.out_proj.weight.zero_()
        m.attn.out_proj.bias.zero_()
    img = np.random.default_rng(2).random((16, 16, 3))
    x = np.random.default_rng(3).uniform(-100, 100, (5, 3))
    feats = initial.shape_feature(m, x, img)
    m.eval()
    with torch.no_grad():
        expected = m.pos_enc(torch.from_numpy(x * pr.COORD_SCALE).to(m.dtype))
    assert np.allclose(feats, expected.numpy(), atol=1e-12)


def test_shape_feature_functional(model, sample_scene_7):
    img = sample_scene_7.image
    x = np.array([[10.0, 20.0, 30.0], [10.0, 20.0, 30.0], [-40.0, 5.0, 80.0]])
    f = initial.shape_feature(model, x, img)
    assert f.shape == (3, initial.InitialConfig().d)
    assert np.array_equal(f[0], f[1])  # equal queries, equal features
    assert not np.array_equal(f[0], f[2])


def test_pose_conditioning_rest_identity(model):
    rest = sk.rest_pose()
    cond = initial.pose_conditioning(model, rest)
    for tr in cond.transforms.transforms:
        assert np.allclose(tr.rotation, np.eye(3), atol=1e-12)
        assert np.allclose(tr.translation, 0.0, atol=1e-12)
    assert np.array_equal(cond.root, rest[0])
    assert cond.lengths.shape == (20,)
    assert cond.f_phi.shape == (20, initial.InitialConfig().c_phi)
    assert cond.f_omega.shape == (20, initial.InitialConfig().c_omega)


def test_pose_conditioning_rigid_move_keeps_length_features(model):
    rng = np.random.default_rng(5)
    posed = sk.forward_kinematics(sk.rest_pose(), sk.sample_joint_angles(rng))
    a = 0.8
    R = np.array(
        [[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1.0]]
    )
    moved = posed @ R.T + np.array([12.0, -7.0, 31.0])
    c1 = initial.pose_conditioning(model, posed)
    c2 = initial.pose_conditioning(model, moved)
    assert np.array_equal(c1.lengths, c2.lengths) or np.allclose(c1.lengths, c2.lengths, atol=1e-9)
    assert np.allclose(c1.f_phi, c2.f_phi, atol=1e-9)
    # determinism of the pose features across calls
    c3 = initial.pose_conditioning(model, moved)
    assert np.array_equal(c2.f_omega, c3.f_omega)


def test_mirrored_scene_swaps_columns(model, gen_config):
    """Mirroring the whole scene (keypoints + honestly rendered image) swaps hands."""
    s = scenes.sample_scene(19, gen_config)
    J_m = sk.TwoHandKeypoints(
        left=sk.mirror_hand(s.keypoints.right), right=sk.mirror_hand(s.keypoints.left)
    )
    image_m = scenes.render(
        s.camera,
        scenes.CapsuleHand(J_m.left, s.right_radii),
        scenes.CapsuleHand(J_m.right, s.left_radii),
    )
    x = np.random.default_rng(6).uniform(-150, 150, (48, 3))
    base = initial.eval_two_hands(model, x, s.image, s.keypoints)
    swapped = initial.eval_two_hands(model, sk.mirror_points(x), image_m, J_m)
    assert np.max(np.abs(base - swapped[:, ::-1])) < 1e-5


def test_bone_subset_monotone(model, sample_scene_7):
    s = sample_scene_7
    x = np.random.default_rng(7).uniform(-150, 150, (40, 3))
    full = initial.eval_initial(model, x, s.image, s.keypoints.right, "right")
    some = initial.eval_initial(
        model, x, s.image, s.keypoints.right, "right", bones=[0, 3, 11]
    )
    single = initial.eval_initial(model, x, s.image, s.keypoints.right, "right", bones=[3])
    assert np.all(some <= full + 1e-12)
    assert np.all(single <= some + 1e-12)


def test_per_query_bitwise_independence(model, sample_scene_7):
    s = sample_scene_7
    rng = np.random.default_rng(8)
    x = rng.uniform(-150, 150, (300, 3))
    full = initial.eval_two_hands(model, x, s.image, s.keypoints)
    # subset of rows
    sub = initial.eval_two_hands(model, x[50:70], s.image, s.keypoints)
    assert np.array_equal(sub, full[50:70])
    # single query
    one = initial.eval_two_hands(model, x[123], s.image, s.keypoints)
    assert np.array_equal(one[0], full[123])
    # removal keeps the others bit-identical
    keep = np.r_[0:123, 124:300]
    removed = initial.eval_two_hands(model, x[keep], s.image, s.keypoints)
    assert np.array_equal(removed, full[keep])
    # crossing an internal chunk boundary
    small_chunk = initial.eval_two_hands(model, x, s.image, s.keypoints, chunk=128)
    assert np.array_equal(small_chunk, full)


def test_field_closure_matches_eval(model, sample_scene_7):
    s = sample_scene_7
    field = initial.initial_field(model, s.image, s.keypoints)
    x = np.random.default_rng(9).uniform(-150, 150, (37, 3))
    assert np.array_equal(field(x), initial.eval_two_hands(model, x, s.image, s.keypoints))


def test_eval_rejects_bad_queries(model, sample_scene_7):
    with pytest.raises(ValueError):
        initial.eval_two_hands(
            model, np.zeros((3, 4)), sample_scene_7.image, sample_scene_7.keypoints
        )


def test_grad_part_networks():
    net = pr.init_params(initial.BonewiseMLP(2, 5, 3, 6, 3), seed=2).double()
    x = torch.randn(2, 4, 5, dtype=torch.float64)
    inject = torch.randn(4, 3, dtype=torch.float64)
    finite_difference_check(net, lambda: net(x, inject).square().mean())


def test_grad_full_tiny_model(tiny_model, gen_config):
    m = tiny_model.double()
    rng = np.random.default_rng(10)
    img = torch.from_numpy(rng.random((16, 16, 3)))
    posed = sk.forward_kinematics(sk.rest_pose(), sk.sample_joint_angles(rng))
    hand = m.hand_inputs(posed)
    x = torch.from_numpy(rng.uniform(-100, 100, (6, 3)))

    def loss():
        tokens = m.patch_tokens(img)
        return torch.sigmoid(m.side_logits(x, tokens, hand)).square().mean()

    finite_difference_check(m, loss, max_coords=4)
