import numpy as np
import pytest

from conftest import random_pose
from rhythmhead import geometry as g
from rhythmhead import numeric as nm
from rhythmhead import render as r
from rhythmhead import synthesis as S
from rhythmhead.numeric import checkpoint
from rhythmhead.numeric import functional as F
from rhythmhead.numeric import tensor as T
from rhythmhead.synthesis.training import batch_inputs, run_generator

TINY = S.GeneratorConfig(image_size=16, K=3, channels=4, embed_dim=8, fuse_dim=4, lmk_channels=2, decoder_channels=(4, 4, 4), pyramid_channels=2)


def tiny_inputs(rng, cfg=TINY, B=1):
    H = cfg.image_size
    return {
        "refs": rng.uniform(-1, 1, (B, cfg.K, 3, H, H)),
        "ref_lmks": (rng.uniform(size=(B, cfg.K, 1, H, H)) > 0.7).astype(float),
        "query": (rng.uniform(size=(B, 1, H, H)) > 0.7).astype(float),
        "proj": rng.uniform(-1, 1, (B, 3, H, H)),
        "match": rng.uniform(-1, 1, (B, 3, H, H)),
    }


# --- landmark images --------------------------------------------------------------


def bresenham(x0, y0, x1, y1):
    pts = set()
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx, sy = (1 if x0 < x1 else -1), (1 if y0 < y1 else -1)
    err = dx + dy
    while True:
        pts.add((x0, y0))
        if x0 == x1 and y0 == y1:
            return pts
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def test_landmarks_outside_image_draw_nothing(canonical):
    img = S.render_landmark_image(canonical.landmarks + [100.0, 0, 0])
    assert img.shape == (64, 64) and not img.any()


def test_landmark_image_is_deterministic_and_in_range(canonical):
    pose = g.RigidTransform.from_vector([0.1, -0.2, 0.05, 0.1, 0, 0])
    a = S.render_landmark_image(canonical.landmarks, pose)
    b = S.render_landmark_image(canonical.landmarks, pose)
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1 and a.max() > 0.9


@pytest.mark.parametrize("seed", range(4))
def test_landmark_pixel_count_matches_bresenham(canonical, seed):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng, max_angle=0.3, max_shift=0.2)
    cam = r.Camera()
    img = S.render_landmark_image(canonical.landmarks, pose, cam)
    uv = r.project_points(pose.inverse().apply(canonical.landmarks), cam)[:, :2]
    px = np.floor(uv).astype(int)
    oracle = set()
    for i, j in S.CONNECTIVITY:
        oracle |= bresenham(*px[i], *px[j])
    count = int((img > 0).sum())
    assert abs(count - len(oracle)) <= 0.2 * len(oracle), (count, len(oracle))


# --- activation maps ------------------------------------------------------------------


def test_single_reference_alpha_is_one():
    rng = np.random.default_rng(0)
    cfg = S.GeneratorConfig(image_size=16, K=1, channels=4, embed_dim=8, fuse_dim=4, lmk_channels=2, decoder_channels=(4, 4, 4), pyramid_channels=2)
    m = S.GeneratorModel(cfg, rng)
    x = tiny_inputs(rng, cfg)
    a = S.activation_maps(m, x["ref_lmks"], x["query"])
    assert a.shape == (1, 1, 4, 4)
    assert np.all(a.data == 1.0)


def test_equal_references_give_uniform_alpha():
    rng = np.random.default_rng(1)
    m = S.GeneratorModel(TINY, rng)
    one = (rng.uniform(size=(1, 16, 16)) > 0.6).astype(float)
    a = S.activation_maps(m, np.stack([one] * 3), rng.uniform(size=(16, 16)))
    np.testing.assert_allclose(a.data, 1 / 3, atol=1e-7)


@pytest.mark.parametrize("K", [1, 8, 32])
def test_alpha_normalization(K):
    rng = np.random.default_rng(K)
    cfg = S.GeneratorConfig(image_size=16, K=K, channels=4, embed_dim=8, fuse_dim=4, lmk_channels=2, decoder_channels=(4, 4, 4), pyramid_channels=2)
    m = S.GeneratorModel(cfg, rng)
    for _ in range(10):
        scale = rng.uniform(0.1, 20)
        a = S.activation_maps(m, rng.uniform(0, scale, (2, K, 1, 16, 16)), rng.uniform(0, scale, (2, 1, 16, 16))).data
        assert a.min() >= 0
        assert np.abs(a.sum(axis=1) - 1).max() <= 1e-6


def test_alpha_retrieves_matching_reference_after_training():
    rng = np.random.default_rng(2)
    K = 4
    cfg = S.GeneratorConfig(image_size=16, K=K, channels=8, embed_dim=8, fuse_dim=4, lmk_channels=2, decoder_channels=(4, 4, 4), pyramid_channels=2)
    m = S.GeneratorModel(cfg, rng)
    refs = (rng.uniform(size=(K, 1, 16, 16)) > 0.7).astype(float)
    params = [p for layer in m.activation_encoder for p in (layer.weight, layer.bias)]
    opt = nm.Adam(params, lr=1e-2)
    batch = np.broadcast_to(refs, (K, K, 1, 16, 16))
    for _ in range(100):
        opt.zero_grad()
        a = S.activation_maps(m, batch, refs)  # sample j queries with reference j
        picked = sum(a[j, j] for j in range(K))
        loss = -T.mean(picked) * (1.0 / K)
        T.backward(loss)
        opt.step()
    with T.no_grad():
        a = S.activation_maps(m, batch, refs).data
    means = a.mean(axis=(2, 3))
    np.testing.assert_array_equal(means.argmax(axis=1), np.arange(K))


def test_activation_shape_errors():
    rng = np.random.default_rng(3)
    m = S.GeneratorModel(TINY, rng)
    with pytest.raises(S.SynthesisError):
        S.activation_maps(m, np.zeros((3, 1, 16, 16)), np.zeros((1, 8, 8)))


# --- reference embedding ----------------------------------------------------------------


def test_single_reference_embedding_reduces_to_one_term():
    rng = np.random.default_rng(4)
    cfg = S.GeneratorConfig(image_size=16, K=1, channels=4, embed_dim=8, fuse_dim=4, lmk_channels=2, decoder_channels=(4, 4, 4), pyramid_channels=2)
    m = S.GeneratorModel(cfg, rng)
    x = tiny_inputs(rng, cfg)
    e_y, e_l = S.embed_references(m, x["refs"], x["ref_lmks"], np.ones((1, 1, 4, 4)))

    def two(layers, v):
        for layer in layers:
            v = T.leaky_relu(layer(v))
        return v

    qy = two(m.image_features, x["refs"][0])
    ql = two(m.landmark_features, x["ref_lmks"][0])
    ex = two(m.exchange, T.concat([qy, ql], axis=1))
    qy_x = m.exchange_image(T.concat([qy, ex], axis=1))
    gate = m.gate_image[1](T.leaky_relu(m.gate_image[0](qy)))
    s = T.leaky_relu(m.reduce_image[0](qy_x + gate))
    expected = m.reduce_image[1](s.reshape(1, -1))
    np.testing.assert_allclose(e_y.data, expected.data, atol=1e-6)
    assert e_l.shape == (1, cfg.embed_dim)


def test_duplicated_references_leave_embedding_unchanged():
    rng = np.random.default_rng(5)
    cfg = S.GeneratorConfig(image_size=16, K=3, channels=4, embed_dim=8, fuse_dim=4, lmk_channels=2, decoder_channels=(4, 4, 4), pyramid_channels=2, gate_mode="mean")
    m = S.GeneratorModel(cfg, rng)
    x = tiny_inputs(rng, cfg)
    alpha = S.activation_maps(m, x["ref_lmks"], x["query"]).data
    e1 = S.embed_references(m, x["refs"], x["ref_lmks"], alpha)
    dup = lambda v: np.concatenate([v, v], axis=1)
    e2 = S.embed_references(m, dup(x["refs"]), dup(x["ref_lmks"]), dup(alpha) / 2)
    for a, b in zip(e1, e2):
        np.testing.assert_allclose(a.data, b.data, atol=1e-5)


def test_gradient_reaches_every_reference():
    rng = np.random.default_rng(6)
    m = S.GeneratorModel(TINY, rng)
    x = tiny_inputs(rng)
    frames = T.Tensor(x["refs"], requires_grad=True)
    alpha = S.activation_maps(m, x["ref_lmks"], x["query"])
    e_y, _ = S.embed_references(m, frames, x["ref_lmks"], alpha)
    T.backward(T.square(e_y).sum())
    per_ref = np.abs(frames.grad).sum(axis=(0, 2, 3, 4))
    assert np.all(per_ref > 0)


def test_embedding_k_mismatch_raises():
    rng = np.random.default_rng(7)
    m = S.GeneratorModel(TINY, rng)
    x = tiny_inputs(rng)
    with pytest.raises(S.SynthesisError, match="K mismatch"):
        S.embed_references(m, x["refs"], x["ref_lmks"][:, :2], np.ones((1, 3, 4, 4)) / 3)


def test_stacking_gate_rejects_other_k():
    rng = np.random.default_rng(8)
    m = S.GeneratorModel(TINY, rng)
    x = tiny_inputs(rng, S.GeneratorConfig(image_size=16, K=2, channels=4, embed_dim=8, fuse_dim=4, lmk_channels=2, decoder_channels=(4, 4, 4), pyramid_channels=2))
    with pytest.raises(S.SynthesisError, match="K=3"):
        S.embed_references(m, x["refs"], x["ref_lmks"], np.ones((1, 2, 4, 4)) / 2)


# --- fusion ---------------------------------------------------------------------------------


def test_zero_image_embedding_gives_bias_only_theta():
    rng = np.random.default_rng(9)
    m = S.GeneratorModel(TINY, rng)
    theta = S.fuse(m, rng.normal(size=(1, 8)), np.zeros((1, 8)))
    flat = np.concatenate([v.data.reshape(-1) for layer in theta for v in layer.values()])
    bias_e_y = m.fuse_image.bias.data
    # E_F_I(0) is its bias; zero that to reach the exact bias-only case
    m.fuse_image.bias.data[:] = 0
    theta0 = S.fuse(m, rng.normal(size=(1, 8)), np.zeros((1, 8)))
    flat0 = np.concatenate([v.data.reshape(-1) for layer in theta0 for v in layer.values()])
    np.testing.assert_array_equal(flat0, m.fuse_project.bias.data)
    assert bias_e_y.shape == (TINY.fuse_dim,) and flat.shape == flat0.shape


def test_theta_layout_matches_decoder():
    m = S.GeneratorModel(TINY, np.random.default_rng(10))
    theta = S.fuse(m, np.ones((2, 8)), np.ones((2, 8)))
    assert len(theta) == TINY.n_layers
    for layer, c in zip(theta, TINY.decoder_channels):
        assert layer["S"].shape == (2, TINY.lmk_channels, 1, 3, 3)
        assert layer["gamma"].shape == (2, c, TINY.lmk_channels, 3, 3)
        assert layer["beta"].shape == (2, c, TINY.lmk_channels, 3, 3)


def test_fusion_gate_is_a_distribution():
    rng = np.random.default_rng(11)
    m = S.GeneratorModel(TINY, rng)
    gate = T.softmax(m.fuse_landmark(rng.normal(scale=5, size=(4, 8))), axis=1).data
    assert np.all((gate > 0) & (gate < 1))
    np.testing.assert_allclose(gate.sum(axis=1), 1, atol=1e-6)


def test_theta_depends_on_landmark_embedding():
    rng = np.random.default_rng(12)
    m = S.GeneratorModel(TINY, rng)
    e_y, e_l = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
    a = S.fuse(m, e_l, e_y)
    b = S.fuse(m, e_l + 0.1 * rng.normal(size=(1, 8)), e_y)
    diff = sum(float(np.abs(a[i][k].data - b[i][k].data).sum()) for i in range(3) for k in a[i])
    assert diff > 0


# --- warping --------------------------------------------------------------------------------


def test_zero_flow_is_identity():
    img = np.random.default_rng(13).uniform(size=(12, 10, 3))
    out, att = S.warp(img, np.zeros((12, 10, 2)), np.ones((12, 10)))
    np.testing.assert_array_equal(out, img)
    np.testing.assert_array_equal(att, np.ones((12, 10)))


def test_integer_flow_shifts_with_zero_fill():
    img = np.random.default_rng(14).uniform(size=(8, 9))
    flow = np.zeros((8, 9, 2))
    flow[..., 0], flow[..., 1] = 2, -1  # sample x+2, y−1
    out, _ = S.warp(img, flow)
    expected = np.zeros_like(img)
    expected[1:, :-2] = img[:-1, 2:]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_attention_is_box_filtered_visibility():
    vis = np.zeros((7, 7))
    vis[3, 3] = 1
    _, att = S.warp(np.zeros((7, 7)), np.zeros((7, 7, 2)), vis)
    np.testing.assert_allclose(att[2:5, 2:5], 1 / 9)
    assert att.sum() == pytest.approx(1.0)


def test_warp_rejects_bad_flow():
    with pytest.raises(ValueError):
        S.warp(np.zeros((4, 4)), np.zeros((4, 3, 2)))
    with pytest.raises(ValueError):
        S.warp(np.zeros((4, 4)), np.full((4, 4, 2), np.nan))


@pytest.mark.parametrize("seed", range(3))
def test_warped_render_matches_target_render(textured_template, seed):
    rng = np.random.default_rng(seed)
    cam = r.Camera()
    a = random_pose(rng, max_angle=0.15, max_shift=0.1)
    b = random_pose(rng, max_angle=0.15, max_shift=0.1)
    mesh_a = r.pose_mesh(textured_template, g.RigidTransform(), a)
    src, _ = r.soft_rasterize(mesh_a, cam)
    dst, _ = r.soft_rasterize(r.pose_mesh(textured_template, g.RigidTransform(), b), cam)
    flow, vis = g.rigid_flow(mesh_a, a, b, cam)
    out, att = S.warp(src.data, flow, vis)
    inner = att >= 1.0  # visible with a visible neighborhood
    assert inner.sum() > 500
    assert np.abs(out[inner] - dst.data[inner]).mean() < 0.05


# --- composition ---------------------------------------------------------------------------


def tiny_compose_inputs(m, rng, B=1):
    x = tiny_inputs(rng, m.config, B)
    e_y = rng.normal(size=(B, m.config.embed_dim))
    theta = S.fuse(m, rng.normal(size=(B, m.config.embed_dim)), e_y)
    return x, e_y, theta


def test_forced_identity_equals_plain_decoder():
    rng = np.random.default_rng(15)
    m = S.GeneratorModel(TINY, rng)
    x, e_y, theta = tiny_compose_inputs(m, rng)
    out = S.compose_frame(m, theta, e_y, x["query"], x["proj"], x["match"], force_identity=True)
    h = m.decoder_input(e_y).reshape(1, 4, 4, 4)
    for i in range(3):
        n = F.instance_norm(h)
        h = T.leaky_relu(n + n + n)  # three branches with γ ≡ 1, β ≡ 0
        if i < 2:
            h = m.upsample[i](h)
    np.testing.assert_allclose(out.data, T.tanh(m.to_rgb(h)).data, atol=1e-6)


def test_compose_output_range():
    rng = np.random.default_rng(16)
    m = S.GeneratorModel(TINY, rng)
    for scale in (1.0, 100.0):
        x, e_y, theta = tiny_compose_inputs(m, rng, B=2)
        out = S.compose_frame(m, theta, scale * e_y, scale * x["query"], scale * x["proj"], x["match"])
        assert out.shape == (2, 3, 16, 16)
        assert out.data.min() >= -1 and out.data.max() <= 1


def test_gradient_reaches_every_compose_input():
    rng = np.random.default_rng(17)
    m = S.GeneratorModel(TINY, rng)
    x, e_y, theta = tiny_compose_inputs(m, rng)
    lmk, proj, match, ey = (T.Tensor(v, requires_grad=True) for v in (x["query"], x["proj"], x["match"], e_y))
    th = [{k: T.Tensor(v.data, requires_grad=True) for k, v in layer.items()} for layer in theta]
    out = S.compose_frame(m, th, ey, lmk, proj, match)
    T.backward(T.square(out).sum())
    for name, t in (("landmark", lmk), ("projected", proj), ("matched", match), ("e_y", ey)):
        assert t.grad is not None and np.abs(t.grad).sum() > 0, name
    for layer in th:
        for k, t in layer.items():
            assert t.grad is not None and np.abs(t.grad).sum() > 0, k


def test_compose_finite_differences():
    rng = np.random.default_rng(18)
    with nm.precision(np.float64):
        m = S.GeneratorModel(TINY, rng)
        x, e_y, theta = tiny_compose_inputs(m, rng)
        ey = T.Tensor(e_y, requires_grad=True)
        proj = T.Tensor(x["proj"], requires_grad=True)
        th = [{k: T.Tensor(v.data, requires_grad=True) for k, v in layer.items()} for layer in theta]
        w = rng.normal(size=(1, 3, 16, 16))

        def loss():
            return (S.compose_frame(m, th, ey, x["query"], proj, x["match"]) * w).sum()

        tensors = [ey, proj, th[0]["gamma"], th[1]["S"], th[2]["beta"], m.spade_matched[1][0].weight, m.to_rgb.weight]
        errs = nm.gradient_errors(loss, tensors, epsilon=1e-6, max_coords=25, rng=rng)
    assert max(errs) < 1e-3, errs


def test_compose_size_mismatch_names_layer():
    rng = np.random.default_rng(19)
    m = S.GeneratorModel(TINY, rng)
    x, e_y, theta = tiny_compose_inputs(m, rng)
    bad = [dict(layer) for layer in theta]
    bad[1]["gamma"] = T.Tensor(np.zeros((1, 4, 2, 3, 3)))[:, :3]
    with pytest.raises(S.SynthesisError, match="decoder layer 1"):
        S.compose_frame(m, bad, e_y, x["query"], x["proj"], x["match"])
    with pytest.raises(S.SynthesisError, match="projected"):
        S.compose_frame(m, theta, e_y, x["query"], np.zeros((1, 3, 8, 8)), x["match"])
    with pytest.raises(S.SynthesisError, match="theta has 2 layers"):
        S.compose_frame(m, theta[:2], e_y, x["query"], x["proj"], x["match"])


def test_single_frame_overfit():
    rng = np.random.default_rng(20)
    cfg = S.GeneratorConfig(image_size=32, K=2)
    m = S.GeneratorModel(cfg, rng)
    yy, xx = np.mgrid[0:32, 0:32] / 32.0
    target = np.stack([np.sin(3 * xx), np.cos(2 * yy), xx * yy - 0.5])[None] * 0.8
    x = tiny_inputs(rng, cfg)
    opt = nm.Adam(m.parameters(), lr=1e-3)
    for _ in range(300):
        opt.zero_grad()
        out, _ = S.generator_forward(m, x["refs"], x["ref_lmks"], x["query"], x["proj"], x["match"])
        T.backward(T.mean(T.absolute(out - target)))
        opt.step()
    with T.no_grad():
        out, _ = S.generator_forward(m, x["refs"], x["ref_lmks"], x["query"], x["proj"], x["match"])
    assert np.abs(out.data - target).mean() < 0.05


# --- matting ---------------------------------------------------------------------------------


def test_matting_identities_are_bit_exact():
    rng = np.random.default_rng(21)
    C, R = rng.normal(size=(3, 8, 8)), rng.normal(size=(3, 8, 8))
    np.testing.assert_array_equal(S.matting_compose(C, np.ones((8, 8)), R), R)
    np.testing.assert_array_equal(S.matting_compose(C, np.zeros((8, 8)), R), C)
    Ct, Rt = T.Tensor(C), T.Tensor(R)
    np.testing.assert_array_equal(S.matting_compose(Ct, T.Tensor(np.ones((8, 8))), Rt).data, Rt.data)
    np.testing.assert_array_equal(S.matting_compose(Ct, T.Tensor(np.zeros((8, 8))), Rt).data, Ct.data)


def test_matting_half_blend_of_opposites_is_zero():
    R = np.random.default_rng(22).normal(size=(3, 5, 5))
    assert np.all(S.matting_compose(-R, np.full((5, 5), 0.5), R) == 0)


def test_matting_is_linear():
    rng = np.random.default_rng(23)
    A = rng.uniform(size=(6, 6))
    C1, C2, R1, R2 = (rng.normal(size=(6, 6)) for _ in range(4))
    a, b = 0.7, -1.3
    lhs = S.matting_compose(a * C1 + b * C2, A, a * R1 + b * R2)
    rhs = a * S.matting_compose(C1, A, R1) + b * S.matting_compose(C2, A, R2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_matting_clamps_with_warning():
    C, R = np.zeros((4, 4)), np.ones((4, 4))
    with pytest.warns(RuntimeWarning, match="clamped"):
        out = S.matting_compose(C, np.full((4, 4), 1.5), R)
    np.testing.assert_array_equal(out, R)
    with pytest.raises(S.SynthesisError):
        S.matting_compose(np.zeros((3, 4, 4)), np.ones((4, 4)), np.zeros((3, 5, 5)))


def test_matting_gradients():
    A = T.Tensor(np.full((2, 2), 0.25), requires_grad=True)
    C = T.Tensor(np.ones((2, 2)), requires_grad=True)
    R = T.Tensor(np.full((2, 2), 3.0), requires_grad=True)
    T.backward(S.matting_compose(C, A, R).sum())
    np.testing.assert_allclose(A.grad, 2.0)
    np.testing.assert_allclose(C.grad, 0.75)
    np.testing.assert_allclose(R.grad, 0.25)


# --- discriminator ---------------------------------------------------------------------------


def test_discriminator_shapes_and_feature_count():
    rng = np.random.default_rng(24)
    d = S.DiscriminatorModel(rng, channels=8, depth=3)
    scores, feats = S.discriminate(d, rng.uniform(-1, 1, (2, 3, 64, 64)), rng.uniform(size=(2, 1, 64, 64)))
    assert [s.shape for s in scores] == [(2, 1, 8, 8), (2, 1, 4, 4)]
    assert [len(f) for f in feats] == [3, 3]
    with pytest.raises(S.SynthesisError):
        S.discriminate(d, np.zeros((1, 3, 64, 64)), np.zeros((1, 1, 32, 32)))


def test_discriminator_shift_equivariance():
    rng = np.random.default_rng(25)
    d = S.DiscriminatorModel(rng, channels=8, depth=3)
    img = np.zeros((1, 3, 96, 96))
    cond = np.zeros((1, 1, 96, 96))
    img[..., 16:80, 16:80] = rng.uniform(-1, 1, (3, 64, 64))
    shifted = np.roll(img, 8, axis=3)
    (s0, _), _ = S.discriminate(d, img, cond)
    (s1, _), _ = S.discriminate(d, shifted, cond)
    # one patch stride (8 px) moves the score map by one cell; compare away from the border
    np.testing.assert_allclose(s1.data[0, 0, 1:-1, 2:-1], s0.data[0, 0, 1:-1, 1:-2], atol=1e-5)
    (c, _), _ = S.discriminate(d, np.full((1, 3, 96, 96), 0.3), np.full((1, 1, 96, 96), 0.3))
    interior = c.data[0, 0, 2:-2, 2:-2]
    np.testing.assert_allclose(interior, interior[0, 0], atol=1e-6)


# --- losses -------------------------------------------------------------------------------------


def loss_setup(seed=26, size=32):
    rng = np.random.default_rng(seed)
    d = S.DiscriminatorModel(rng, channels=8)
    target = rng.uniform(-1, 1, (1, 3, size, size))
    cond = rng.uniform(size=(1, 1, size, size))
    return rng, d, target, cond


def test_perfect_output_has_zero_fm_and_pct():
    _, d, target, cond = loss_setup()
    total, parts = S.total_loss(T.Tensor(target), target, d, cond)
    assert parts["fm"] == 0.0 and parts["pct"] == 0.0 and parts["w"] == 0.0
    assert total.item() == pytest.approx(parts["gan"])


def test_zero_flow_warp_of_target_has_zero_warp_loss():
    _, _, target, _ = loss_setup()
    warped, att = S.warp(target[0].transpose(1, 2, 0), np.zeros((32, 32, 2)), np.ones((32, 32)))
    assert S.warp_loss(target, [warped.transpose(2, 0, 1)[None]], [att[None, None]]).item() == 0.0


def test_breakdown_matches_independent_recomputation():
    rng, d, target, cond = loss_setup()
    fake = rng.uniform(-1, 1, target.shape)
    warped = [rng.uniform(-1, 1, target.shape), rng.uniform(-1, 1, target.shape)]
    masks = [(rng.uniform(size=(1, 1, 32, 32)) > 0.5).astype(float), np.ones((1, 1, 32, 32))]
    w = S.LossWeights(fm=2.0, pct=3.0, w=4.0)
    total, parts = S.total_loss(T.Tensor(fake), target, d, cond, warped, masks, w)

    with T.no_grad():
        fs, ff = S.discriminate(d, fake, cond)
        _, rf = S.discriminate(d, target, cond)
    gan = sum(np.mean((s.data.astype(np.float64) - 1) ** 2) for s in fs)
    fm = sum(np.mean([np.abs(a.data - b.data).mean() for a, b in zip(fa, ra)]) for fa, ra in zip(ff, rf))

    def pool(x):
        return x.reshape(1, 3, x.shape[2] // 2, 2, x.shape[3] // 2, 2).mean(axis=(3, 5))

    pct, a, b = 0.0, fake, target
    for _ in range(3):
        pct += np.abs(a - b).mean()
        a, b = pool(a), pool(b)
    lw = sum((np.abs(x - target) * np.broadcast_to(m, x.shape)).sum() / np.broadcast_to(m, x.shape).sum() for x, m in zip(warped, masks))
    for key, ref in (("gan", gan), ("fm", fm), ("pct", pct), ("w", lw)):
        assert parts[key] == pytest.approx(ref, rel=1e-5), key
    wt = parts["weighted"]
    assert ((wt["gan"] + wt["fm"]) + wt["pct"]) + wt["w"] == total.data
    assert parts["total"] == pytest.approx(gan + 2 * fm + 3 * pct + 4 * lw, rel=1e-5)
    assert all(parts[k] >= 0 for k in ("gan", "fm", "pct", "w"))


def test_hinge_mode_and_unknown_mode():
    rng, d, target, cond = loss_setup()
    fake = rng.uniform(-1, 1, target.shape)
    total, parts = S.total_loss(T.Tensor(fake), target, d, cond, gan_mode="hinge")
    with T.no_grad():
        fs, _ = S.discriminate(d, fake, cond)
    assert parts["gan"] == pytest.approx(-sum(float(s.data.mean()) for s in fs), rel=1e-5, abs=1e-7)
    assert S.discriminator_loss(d, target, fake, cond, "hinge").item() >= 0
    with pytest.raises(ValueError, match="gan_mode"):
        S.total_loss(T.Tensor(fake), target, d, cond, gan_mode="wgan")


def test_pluggable_feature_extractor(tmp_path):
    rng, d, target, cond = loss_setup()
    path = tmp_path / "ext.hmkt"
    checkpoint.save(path, {"conv0.weight": rng.normal(size=(4, 3, 3, 3)), "conv0.bias": np.zeros(4), "conv1.weight": rng.normal(size=(4, 4, 3, 3)), "conv1.bias": np.zeros(4)})
    ext = S.ConvFeatureExtractor.from_checkpoint(path)
    assert [f.shape for f in ext(T.Tensor(target))] == [(1, 4, 32, 32)] * 2
    _, parts = S.total_loss(T.Tensor(target + 0.1), target, d, cond, extractor=ext)
    assert parts["pct"] > 0
    checkpoint.save(tmp_path / "empty.hmkt", {"w": np.zeros(1)})
    with pytest.raises(ValueError):
        S.ConvFeatureExtractor.from_checkpoint(tmp_path / "empty.hmkt")


# --- training ------------------------------------------------------------------------------------


def tiny_samples(rng, n=3, cfg=TINY):
    H = cfg.image_size
    out = []
    for _ in range(n):
        x = tiny_inputs(rng, cfg)
        out.append(
            S.GeneratorSample(
                references=x["refs"][0],
                reference_lmks=x["ref_lmks"][0],
                query_lmk=x["query"][0],
                warped_projected=x["proj"][0],
                projected_attention=np.ones((H, H)),
                warped_matched=x["match"][0],
                matched_attention=rng.uniform(size=(H, H)),
                target=np.tanh(rng.normal(size=(3, H, H))),
            )
        )
    return out


def test_discriminator_only_steps_separate_real_and_fake():
    rng = np.random.default_rng(27)
    gen = S.GeneratorModel(TINY, rng)
    disc = S.DiscriminatorModel(rng, channels=8, depth=2)
    hist = S.train_discriminator_only(gen, disc, tiny_samples(rng), 150, rng, lr=2e-3)
    real, fake = hist[-1]
    assert real > 0.8 and fake < 0.2, hist[-1]
    assert abs(hist[0][0] - hist[0][1]) < abs(real - fake)


def train_tiny(seed, steps=4, **kw):
    rng = np.random.default_rng(seed)
    gen = S.GeneratorModel(TINY, rng)
    disc = S.DiscriminatorModel(rng, channels=8, depth=2)
    samples = tiny_samples(rng)
    hist = S.train_generator(gen, disc, samples, S.TrainConfig(steps=steps, batch_size=2, **kw), rng)
    return gen, disc, hist


def test_training_is_deterministic():
    g1, d1, h1 = train_tiny(28)
    g2, d2, h2 = train_tiny(28)
    assert h1 == h2
    assert checkpoint.dumps(g1.state_dict()) == checkpoint.dumps(g2.state_dict())
    assert checkpoint.dumps(d1.state_dict()) == checkpoint.dumps(d2.state_dict())
    assert set(h1[0]) == {"step", "gan", "fm", "pct", "w", "total", "d_loss", "l1"}


def test_checkpoints_are_written_every_n_steps(tmp_path):
    train_tiny(29, steps=4, save_every=2, checkpoint_dir=str(tmp_path))
    gen = S.GeneratorModel(TINY, np.random.default_rng(0))
    checkpoint.load_module(tmp_path / "generator.hmkt", gen)
    assert (tmp_path / "discriminator.hmkt").exists()


def test_nan_aborts_and_keeps_last_good_checkpoint(tmp_path):
    rng = np.random.default_rng(30)
    gen = S.GeneratorModel(TINY, rng)
    disc = S.DiscriminatorModel(rng, channels=8, depth=2)

    def corrupt(record):
        if record["step"] == 2:
            gen.to_rgb.weight.data[:] = np.nan

    cfg = S.TrainConfig(steps=6, save_every=2, checkpoint_dir=str(tmp_path))
    with pytest.raises(S.TrainingError, match="step 3; last good checkpoint at step 2"):
        S.train_generator(gen, disc, tiny_samples(rng), cfg, rng, log=corrupt)
    state = checkpoint.load(tmp_path / "generator.hmkt")
    assert all(np.isfinite(v).all() for v in state.values())


def test_empty_dataset_rejected():
    rng = np.random.default_rng(31)
    with pytest.raises(S.TrainingError):
        S.train_generator(S.GeneratorModel(TINY, rng), S.DiscriminatorModel(rng), [], S.TrainConfig(steps=1), rng)


def test_tiny_video_overfit():
    """16 frames at 32×32 with K = 8 references, 3000 alternating steps."""
    from rhythmhead.pipeline import PipelineConfig, synth_scene, training_samples
    from rhythmhead.pipeline.core import train_generator_model

    cfg = PipelineConfig(tau=8, n_frames=16, K=8, image_size=32, sample_rate=5000, generator_steps=3000, seed=3)
    scene = synth_scene(1, 16, cfg)
    samples = training_samples(cfg, scene.frames, scene.landmarks)
    gen, _, hist = train_generator_model(cfg, samples)
    with T.no_grad():
        out = run_generator(gen, batch_inputs(samples, range(len(samples)))).data
    targets = np.stack([s.target for s in samples])
    assert np.abs(out - targets).mean() < 0.05
    assert len(hist) == 3000
