import numpy as np
import pytest

from rhythmhead import _ext, geometry as g, render as r
from rhythmhead.numeric import Tensor, precision
from rhythmhead.numeric import tensor as T
from rhythmhead.numeric.gradcheck import gradient_errors

from conftest import smooth_texture


def random_soup(rng, n_faces, spread=1.5, size=0.5):
    cen = rng.uniform(-spread, spread, (n_faces, 1, 3))
    v = (cen + rng.normal(0, size, (n_faces, 3, 3))).reshape(-1, 3)
    return r.TexturedMesh(v, np.arange(3 * n_faces).reshape(n_faces, 3), rng.uniform(size=(3 * n_faces, 3)))


def hard_image(mesh, camera):
    fid, bary, _ = r.hard_rasterize(mesh.vertices, mesh.faces, camera)
    out = np.zeros((camera.height, camera.width, 3))
    cov = fid >= 0
    out[cov] = np.einsum("pk,pkc->pc", bary[cov], mesh.colors[mesh.faces[fid[cov]]])
    return 2 * out - 1, cov


def test_mesh_validation():
    v = np.zeros((3, 3))
    with pytest.raises(r.RenderError):
        r.TexturedMesh(v, [[0, 1, 3]], v)
    with pytest.raises(r.RenderError):
        r.TexturedMesh(v, [[0, 1, 2]], np.zeros((2, 3)))
    with pytest.raises(r.RenderError):
        r.RasterSettings(sigma=0)
    with pytest.raises(r.RenderError):
        r.Camera(0, 4)
    with pytest.raises(r.RenderError):
        r.soft_rasterize(r.TexturedMesh(v, np.zeros((0, 3)), v))


def test_template_mesh_shape():
    t = r.load_template()
    assert 450 <= len(t.vertices) <= 550 and 900 <= len(t.faces) <= 1000
    np.testing.assert_allclose(t.vertices[:68], g.load_canonical().landmarks, atol=1e-9)


def test_template_data_file_matches_builder():
    from rhythmhead.assets import build_canonical_landmarks, build_template_mesh

    v, f = build_template_mesh(np.round(build_canonical_landmarks(), 12))
    t = r.load_template()
    np.testing.assert_array_equal(t.faces, f)
    np.testing.assert_allclose(t.vertices, v, atol=1e-10)


def test_large_triangle_interpolates_vertex_colors():
    cam = r.Camera(8, 8, sx=1.0, sy=1.0, cx=0.0, cy=0.0)
    v = np.array([[-20.0, -20.0, 0.0], [40.0, -20.0, 0.0], [-20.0, 40.0, 0.0]])
    col = np.eye(3)
    img, sil = r.soft_rasterize(r.TexturedMesh(v, [[0, 1, 2]], col), cam, r.RasterSettings(sigma=1e-5, gamma=1e-4))
    fid, bary, _ = r.hard_rasterize(v, [[0, 1, 2]], cam)
    assert (fid == 0).all()
    np.testing.assert_allclose(img.data, 2 * bary - 1, atol=1e-5)
    assert sil.data.min() > 1 - 1e-6


def test_nearer_triangle_wins():
    cam = r.Camera(8, 8, sx=1.0, sy=1.0, cx=0.0, cy=0.0)
    tri = np.array([[-20.0, -20.0], [40.0, -20.0], [-20.0, 40.0]])
    v = np.concatenate([np.c_[tri, np.full(3, 0.5)], np.c_[tri, np.full(3, 0.2)]])
    col = np.concatenate([np.tile([1.0, 0, 0], (3, 1)), np.tile([0, 0, 1.0], (3, 1))])
    img, _ = r.soft_rasterize(r.TexturedMesh(v, [[3, 4, 5], [0, 1, 2]], col), cam, r.RasterSettings(sigma=1e-5, gamma=1e-5))
    np.testing.assert_allclose(img.data, np.broadcast_to([1.0, -1.0, -1.0], img.shape), atol=1e-6)


def test_soft_matches_hard_oracle_in_limit():
    rng = np.random.default_rng(0)
    cam = r.Camera()
    bad = 0
    for _ in range(5):
        mesh = random_soup(rng, int(rng.integers(5, 30)))
        img, sil = r.soft_rasterize(mesh, cam, r.RasterSettings(sigma=1e-4, gamma=1e-4))
        ref, cov = hard_image(mesh, cam)
        bad += ((np.abs(img.data - ref).max(-1) > 1e-2) | ((sil.data > 0.5) != cov)).sum()
    assert bad / (5 * cam.height * cam.width) < 0.01


def test_value_ranges(textured_template):
    img, sil = r.soft_rasterize(textured_template, r.Camera(), r.RasterSettings(sigma=0.5, gamma=0.01))
    assert img.data.min() >= -1 and img.data.max() <= 1
    assert sil.data.min() >= 0 and sil.data.max() <= 1


def test_face_permutation_is_bit_invariant(textured_template):
    rng = np.random.default_rng(1)
    perm = rng.permutation(len(textured_template.faces))
    shuffled = r.TexturedMesh(textured_template.vertices, textured_template.faces[perm], textured_template.colors)
    for s in (r.RasterSettings(), r.RasterSettings(sigma=0.8, gamma=0.05)):
        a = r.soft_rasterize(textured_template, r.Camera(), s)
        b = r.soft_rasterize(shuffled, r.Camera(), s)
        assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)


@pytest.mark.parametrize("seed", range(4))
def test_render_gradients_finite_difference(seed):
    rng = np.random.default_rng(seed)
    cam = r.Camera(16, 16, sx=4.0, sy=-4.0)
    mesh = random_soup(rng, 3, spread=1.0, size=0.6)
    w_img, w_sil = rng.normal(size=(16, 16, 3)), rng.normal(size=(16, 16))
    with precision(np.float64):
        V = Tensor(mesh.vertices, requires_grad=True)
        C = Tensor(mesh.colors, requires_grad=True)
        settings = r.RasterSettings(sigma=0.5, gamma=0.05)

        def fn():
            img, sil = r.soft_rasterize_tensors(V, C, mesh.faces, cam, settings)
            return T.add(T.mean(T.mul(img, w_img)), T.mean(T.mul(sil, w_sil)))

        errs = gradient_errors(fn, [V, C], epsilon=1e-6)
    assert max(errs) < 1e-3, errs


def test_mean_intensity_gradient_on_template(textured_template):
    cam = r.Camera(32, 32, sx=8.0, sy=-8.0)
    with precision(np.float64):
        V = Tensor(textured_template.vertices, requires_grad=True)
        C = Tensor(textured_template.colors, requires_grad=True)
        settings = r.RasterSettings(sigma=0.5, gamma=0.05)
        fn = lambda: T.mean(r.soft_rasterize_tensors(V, C, textured_template.faces, cam, settings)[0])
        errs = gradient_errors(fn, [V, C], epsilon=1e-6, max_coords=60, rng=np.random.default_rng(0))
    assert max(errs) < 1e-3, errs


# --- backends ---------------------------------------------------------------------


def test_backend_parity(textured_template):
    if _ext.BACKEND != "cython":
        pytest.skip("compiled extension not built")
    from rhythmhead._ext import _raster

    rng = np.random.default_rng(2)
    cam = r.Camera()
    s = r.project_points(textured_template.vertices, cam)
    s[:, 2] = (s[:, 2] + 4) / 8
    args = (np.ascontiguousarray(s), np.ascontiguousarray(textured_template.colors), textured_template.faces, 64, 64, 0.3)
    a, b = _raster.soft_pairs(*args), _ext.pure.soft_pairs(*args)
    for key in a:
        np.testing.assert_allclose(a[key], b[key], atol=1e-12)
    n = len(a["pix"])
    gr = (rng.normal(size=n), rng.normal(size=n), rng.normal(size=(n, 3)))
    keys = ("pix", "face", "bary", "wc", "edge", "t")
    ga = _raster.soft_pairs_backward(args[0], args[1], args[2], 64, *(a[k] for k in keys), *gr)
    gb = _ext.pure.soft_pairs_backward(args[0], args[1], args[2], 64, *(a[k] for k in keys), *gr)
    np.testing.assert_allclose(ga[0], gb[0], atol=1e-9)
    np.testing.assert_allclose(ga[1], gb[1], atol=1e-9)
    for x, y in zip(_raster.hard_raster(args[0], args[2], 64, 64), _ext.pure.hard_raster(args[0], args[2], 64, 64)):
        np.testing.assert_allclose(x, y)


def test_pure_fallback_renders_identically(textured_template, monkeypatch):
    a = r.soft_rasterize(textured_template, r.Camera())
    monkeypatch.setattr(r, "kernels", _ext.pure)
    b = r.soft_rasterize(textured_template, r.Camera())
    np.testing.assert_allclose(a[0].data, b[0].data, atol=1e-6)
    np.testing.assert_allclose(a[1].data, b[1].data, atol=1e-6)


def test_env_var_forces_fallback():
    import subprocess
    import sys

    out = subprocess.run(
        [sys.executable, "-c", "import rhythmhead._ext as e; print(e.BACKEND)"],
        env={"RHYTHMHEAD_PURE": "1", "PATH": ""}, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "python"


# --- posing and unprojection ------------------------------------------------------


def test_pose_mesh(textured_template, canonical):
    rng = np.random.default_rng(3)
    same = r.pose_mesh(textured_template, g.RigidTransform(), g.RigidTransform())
    np.testing.assert_allclose(same.vertices, textured_template.vertices, atol=1e-12)
    for _ in range(5):
        dst = g.RigidTransform(g.axis_angle_to_matrix(rng.normal(0, 0.5, 3)), rng.normal(0, 0.3, 3))
        posed = r.pose_mesh(textured_template, g.RigidTransform(), dst)
        fit = g.fit_rigid(posed.vertices[:68], canonical.landmarks, canonical.rigid_indices)
        assert g.geodesic_angle(fit.rotation, dst.rotation) < 1e-9
        np.testing.assert_allclose(fit.translation, dst.translation, atol=1e-9)
        np.testing.assert_array_equal(posed.faces, textured_template.faces)


def test_unproject_identity_landmarks(textured_template):
    cam = r.Camera()
    img = r.soft_rasterize(textured_template, cam)[0].data
    mesh = r.unproject(img, textured_template.vertices[:68], r.load_template(), cam)
    np.testing.assert_allclose(mesh.vertices, textured_template.vertices, atol=1e-9)


def test_unproject_uniform_translation_is_exact():
    t = r.load_template()
    img = np.zeros((64, 64, 3))
    shift = np.array([0.1, -0.2, 0.05])
    mesh = r.unproject(img, t.vertices[:68] + shift, t, r.Camera())
    np.testing.assert_allclose(mesh.vertices, t.vertices + shift, atol=1e-9)


def test_unproject_render_round_trip(textured_template):
    cam = r.Camera()
    s = r.RasterSettings(sigma=1e-3, gamma=1e-4)
    img, sil = r.soft_rasterize(textured_template, cam, s)
    mesh = r.unproject(img.data, textured_template.vertices[:68], r.load_template(), cam)
    again, _ = r.soft_rasterize(mesh, cam, s)
    cov = sil.data > 0.5
    assert np.abs(again.data - img.data)[cov].mean() < 0.05


def test_unproject_occluded_vertices_keep_template_color():
    t = r.load_template()
    yaw = g.RigidTransform(g.axis_angle_to_matrix([0, np.radians(60), 0]))
    lm = r.pose_mesh(t, g.RigidTransform(), yaw).vertices[:68]
    mesh = r.unproject(np.ones((64, 64, 3)), lm, t, r.Camera())
    white = np.all(np.isclose(mesh.colors, 1.0, atol=1e-9), axis=1)
    gray = np.all(mesh.colors == 0.5, axis=1)
    assert white.any() and gray.any() and (white | gray).all()


def test_unproject_misaligned_raises():
    t = r.load_template()
    with pytest.raises(r.RenderError, match="outside"):
        r.unproject(np.zeros((64, 64, 3)), t.vertices[:68] + [50.0, 0, 0], t, r.Camera())


def test_project_frame_same_pose_is_rerender(textured_template):
    p = g.RigidTransform(g.axis_angle_to_matrix([0.1, 0.2, 0.0]), [0.1, 0, 0])
    a = r.project_frame(textured_template, p, p)
    b = r.soft_rasterize(textured_template)[0].data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_project_frame_small_yaw_consistent_with_flow(textured_template):
    cam = r.Camera()
    s = r.RasterSettings(sigma=1e-3, gamma=1e-4)
    ref, dst = g.RigidTransform(), g.RigidTransform(g.axis_angle_to_matrix([0, np.radians(8), 0]))
    src_img = r.project_frame(textured_template, ref, ref, cam, s)
    dst_img = r.project_frame(textured_template, ref, dst, cam, s)
    flow, vis = g.rigid_flow(textured_template, ref, dst, cam)
    ys, xs = np.nonzero(vis)
    warped = r.sample_bilinear(src_img, np.stack([xs + 0.5, ys + 0.5], 1) + flow[ys, xs])
    assert np.abs(warped - dst_img[ys, xs]).mean() < 0.05


def test_silhouette_area_continuous_in_yaw(textured_template):
    areas = []
    for deg in range(0, 21):
        pose = g.RigidTransform(g.axis_angle_to_matrix([0, np.radians(deg), 0]))
        _, sil = r.soft_rasterize(r.pose_mesh(textured_template, g.RigidTransform(), pose))
        areas.append(sil.data.sum())
    areas = np.array(areas)
    assert np.max(np.abs(np.diff(areas)) / areas[:-1]) < 0.02


# --- files ------------------------------------------------------------------------


def test_obj_round_trip(tmp_path, textured_template):
    r.save_obj(tmp_path / "m.obj", textured_template)
    m = r.load_obj(tmp_path / "m.obj")
    np.testing.assert_array_equal(m.faces, textured_template.faces)
    np.testing.assert_allclose(m.vertices, textured_template.vertices, atol=1e-11)
    np.testing.assert_allclose(m.colors, textured_template.colors, atol=1e-6)


def test_obj_rejects_quads(tmp_path):
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(r.RenderError, match="triangles"):
        r.load_obj(tmp_path / "q.obj")


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(5).uniform(-1, 1, (8, 9, 3))
    r.save_png(tmp_path / "a.png", img)
    back = r.load_png(tmp_path / "a.png")
    assert back.shape == img.shape and np.abs(back - img).max() <= 1 / 127.5 + 1e-12
