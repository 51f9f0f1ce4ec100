import numpy as np
import pytest
import torch

from conftest import finite_difference_check
from handfield import keypoints as kp, primitives as pr, skeleton as sk


# --- graph ------------------------------------------------------------------


def _components(edges, n):
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in edges:
        parent[find(a)] = find(b)
    return {find(i) for i in range(n)}


def test_graph_two_hand_components():
    g = kp.skeleton_graph()
    assert g.num_nodes == 42
    assert g.edges.shape == (40, 2)
    comps = _components(g.edges.tolist(), 42)
    assert len(comps) == 2
    # no edge crosses the hand boundary
    assert not np.any((g.edges.min(axis=1) < 21) & (g.edges.max(axis=1) >= 21))


def test_graph_cross_wrist_flag():
    g = kp.skeleton_graph(cross_wrist=True)
    assert g.edges.shape == (41, 2)
    assert len(_components(g.edges.tolist(), 42)) == 1
    assert [0, 21] in g.edges.tolist()


def test_graph_right_block_is_shifted_left_block():
    g = kp.skeleton_graph()
    left = {tuple(e) for e in g.edges.tolist() if max(e) < 21}
    right = {tuple(e) for e in g.edges.tolist() if min(e) >= 21}
    assert len(left) == len(right) == 20
    assert {(a + 21, b + 21) for a, b in left} == right


# --- refine -----------------------------------------------------------------


@pytest.fixture(scope="module")
def model():
    return kp.build_model(seed=0)


@pytest.fixture(scope="module")
def trained_like_model():
    """Model with a non-zero output head, as after some training."""
    m = kp.build_model(seed=1)
    with torch.no_grad():
        g = torch.Generator().manual_seed(7)
        for p in m.regressor.layers[-1].parameters():
            p.copy_(torch.rand(p.shape, generator=g) * 0.05)
    return m


def test_residual_identity_at_init(model, sample_scene_7):
    s = sample_scene_7
    out = kp.refine(model, s.keypoints, s.image)
    assert np.array_equal(out.stacked(), s.keypoints.stacked())


def test_output_shape_finite_and_ordering(trained_like_model, sample_scene_7):
    s = sample_scene_7
    out = kp.refine(trained_like_model, s.keypoints, s.image)
    st = out.stacked()
    assert st.shape == (42, 3)
    assert np.all(np.isfinite(st))
    assert np.array_equal(st[:21], out.left)
    assert np.array_equal(st[21:], out.right)


def test_eval_determinism(trained_like_model, sample_scene_7):
    s = sample_scene_7
    a = kp.refine(trained_like_model, s.keypoints, s.image)
    b = kp.refine(trained_like_model, s.keypoints, s.image)
    assert np.array_equal(a.stacked(), b.stacked())


def test_degenerate_pose_accepted(trained_like_model, sample_scene_7):
    s = sample_scene_7
    st = s.keypoints.stacked().copy()
    st[2] = st[1]  # zero-length bone
    out = kp.refine(trained_like_model, sk.TwoHandKeypoints.from_stacked(st), s.image)
    assert np.all(np.isfinite(out.stacked()))


def test_non_finite_inputs_rejected(model, sample_scene_7):
    s = sample_scene_7
    st = s.keypoints.stacked().copy()
    st[5, 1] = np.nan
    with pytest.raises(ValueError, match="finite"):
        kp.refine(model, sk.TwoHandKeypoints.from_stacked(st), s.image)
    bad_img = s.image.copy()
    bad_img[3, 3, 0] = np.inf
    with pytest.raises(ValueError, match="finite"):
        kp.refine(model, s.keypoints, bad_img)


def test_zero_init_head(model):
    out = model.regressor.layers[-1]
    assert torch.all(out.weight == 0) and torch.all(out.bias == 0)


# --- corruption -------------------------------------------------------------


def test_corrupt_sigma_zero_identity(sample_scene_7):
    J = sample_scene_7.keypoints
    out = kp.corrupt_keypoints(J, 0.0, seed=3)
    assert np.array_equal(out.stacked(), J.stacked())


def test_corrupt_seed_determinism(sample_scene_7):
    J = sample_scene_7.keypoints
    a = kp.corrupt_keypoints(J, 10.0, seed=4)
    b = kp.corrupt_keypoints(J, 10.0, seed=4)
    c = kp.corrupt_keypoints(J, 10.0, seed=5)
    assert np.array_equal(a.stacked(), b.stacked())
    assert not np.array_equal(a.stacked(), c.stacked())


def test_corrupt_negative_sigma_rejected(sample_scene_7):
    with pytest.raises(ValueError):
        kp.corrupt_keypoints(sample_scene_7.keypoints, -1.0, seed=0)


def test_corrupt_error_scale_band(sample_scene_7):
    """Mean per-joint displacement of N(0, s^2 I_3) noise lands in [1.5s, 1.7s]."""
    J = sample_scene_7.keypoints
    sigma = 10.0
    errs = []
    for seed in range(240):  # 240 draws x 42 joints > 10^4 samples
        noisy = kp.corrupt_keypoints(J, sigma, seed=seed)
        errs.append(np.linalg.norm(noisy.stacked() - J.stacked(), axis=1))
    mean = float(np.mean(errs))
    assert 1.5 * sigma <= mean <= 1.7 * sigma


# --- gradients --------------------------------------------------------------


def test_grad_tiny_config():
    cfg = kp.KeypointRefinerConfig(
        d=16, hidden=8, image_height=32, image_width=32, patch=8
    )
    m = kp.build_model(cfg, seed=2).double()
    m.eval()  # dropout off: the loss must be a deterministic function
    with torch.no_grad():  # non-zero head so the whole graph matters
        m.regressor.layers[-1].weight.fill_(0.01)
        m.regressor.layers[-1].bias.fill_(0.01)
    rng = np.random.default_rng(12)
    joints = torch.from_numpy(rng.normal(scale=50.0, size=(42, 3)))
    img = torch.from_numpy(rng.random((32, 32, 3)))

    def loss():
        return m.deltas(joints, img).square().mean()

    finite_difference_check(m, loss, max_coords=3)
