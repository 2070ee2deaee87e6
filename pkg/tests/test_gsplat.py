import numpy as np
import pytest
import torch

from _helpers import central_diff, random_scene, rel_err, small_camera
from evsplat.gsplat import (
    Camera, GaussianScene, load_scene, project, render, render_views, render_with_grad, save_scene,
)

FIELDS = ("means", "log_scales", "quats", "opacity_logits", "colors")


def one_gaussian(mean, scale=0.1, logit=0.0, color=(0.8, 0.2, 0.1)):
    return GaussianScene.from_numpy(
        torch.float64, means=[mean], log_scales=[[np.log(scale)] * 3], quats=[[1.0, 0, 0, 0]],
        opacity_logits=[logit], colors=[color])


def test_projection_hand_jacobian():
    cam = Camera(100, 100, 32, 24, 64, 48)
    mean2d, cov2d, depth = project(one_gaussian([0, 0, 2.0]), cam)
    np.testing.assert_allclose(mean2d.numpy(), [32, 24])
    np.testing.assert_allclose(cov2d.numpy(), np.diag([25.3, 25.3]), atol=1e-12)
    assert float(depth) == 2.0


def test_projection_culls_behind_camera():
    assert project(one_gaussian([0, 0, -1.0]), Camera(100, 100, 8, 8, 16, 16)) is None


def test_projection_depth_identity_pose():
    _, _, depth = project(one_gaussian([0.3, -0.2, 1.0]), Camera(50, 50, 8, 8, 16, 16))
    assert float(depth) == 1.0


def test_empty_scene():
    out = render(GaussianScene.empty(), Camera(10, 10, 4, 4, 8, 8), (0.1, 0.2, 0.3))
    np.testing.assert_array_equal(out.color.numpy(), np.broadcast_to([0.1, 0.2, 0.3], (8, 8, 3)))
    assert not out.alpha.any() and not out.depth.any()


def test_single_opaque_gaussian():
    cam = Camera(60, 60, 8, 8, 17, 17)
    bg = np.array([0.3, 0.3, 0.9])
    out = render(one_gaussian([0, 0, 3.0], scale=0.2, logit=12.0), cam, bg)
    c = np.array([0.8, 0.2, 0.1])
    np.testing.assert_allclose(out.color[8, 8].numpy(), 0.99 * c + 0.01 * bg, atol=1e-12)
    assert float(out.depth[8, 8]) == pytest.approx(3.0, rel=1e-2)


def test_two_half_transparent_layers():
    c1, c2, bg = np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0])
    scene = GaussianScene.from_numpy(
        torch.float64, means=[[0, 0, 2.0], [0, 0, 1.0]], log_scales=np.log([[0.1] * 3, [0.05] * 3]),
        quats=[[1.0, 0, 0, 0]] * 2, opacity_logits=[0.0, 0.0], colors=[c2, c1])
    out = render(scene, Camera(40, 40, 8, 8, 17, 17), bg)
    np.testing.assert_allclose(out.color[8, 8].numpy(), 0.5 * c1 + 0.25 * c2 + 0.25 * bg, atol=1e-12)


def test_untouched_pixels_keep_background():
    cam = Camera(60, 60, 4, 4, 32, 32)
    bg = (0.2, 0.4, 0.6)
    out = render(one_gaussian([0, 0, 3.0], scale=0.05), cam, bg)
    # 3-sigma box is a few pixels around (4, 4)
    np.testing.assert_array_equal(out.color[20:, 20:].numpy(), np.broadcast_to(bg, (12, 12, 3)))
    assert not out.alpha[20:, 20:].any()


def test_alpha_bounds_and_depth_finite(rng):
    scene = random_scene(rng, 30)
    out = render(scene, small_camera(24), (0.5, 0.5, 0.5))
    a = out.alpha.numpy()
    assert a.min() >= 0 and a.max() <= 1
    assert np.isfinite(out.depth.numpy()[a > 1e-4]).all()


def test_nearer_splat_dominates_depth():
    scene = GaussianScene.from_numpy(
        torch.float64, means=[[0, 0, 4.0], [0, 0, 2.0]], log_scales=np.log([[0.3] * 3, [0.15] * 3]),
        quats=[[1.0, 0, 0, 0]] * 2, opacity_logits=[12.0, 12.0], colors=[[1, 0, 0], [0, 1, 0]])
    out = render(scene, Camera(30, 30, 8, 8, 17, 17))
    assert float(out.depth[8, 8]) == pytest.approx(2.0, rel=1e-2)


def test_non_finite_parameter_names_index(rng):
    scene = random_scene(rng, 4)
    scene.colors[2, 1] = float("nan")
    with pytest.raises(FloatingPointError, match="Gaussian 2"):
        render(scene, small_camera())


def test_deterministic_and_backends_agree(rng):
    scene = random_scene(rng, 25)
    cam = small_camera(20)
    a = render(scene, cam, (0.2, 0.3, 0.4))
    b = render(scene, cam, (0.2, 0.3, 0.4))
    assert torch.equal(a.color, b.color) and torch.equal(a.depth, b.depth)
    c = render(scene, cam, (0.2, 0.3, 0.4), backend="torch")
    np.testing.assert_allclose(a.color.numpy(), c.color.numpy(), atol=1e-12)
    np.testing.assert_allclose(a.depth.numpy(), c.depth.numpy(), atol=1e-10)
    np.testing.assert_allclose(a.alpha.numpy(), c.alpha.numpy(), atol=1e-12)


def test_multi_view_batch_matches_single_views(rng):
    scene = random_scene(rng, 10)
    cams = [small_camera(16), small_camera(16).with_pose(np.eye(4) @ small_camera(16).pose)]
    cams[1].pose[0, 3] += 0.1
    out = render_views(scene, cams, (0, 0, 0))
    for i, cam in enumerate(cams):
        np.testing.assert_array_equal(out.color[i].numpy(), render(scene, cam).color.numpy())


def test_zero_upstream_zero_gradients(rng):
    scene = random_scene(rng, 5)
    cam = small_camera()
    grads = render_with_grad(scene, cam, (0.1, 0.1, 0.1), {"color": np.zeros((16, 16, 3))})
    assert all(not g.any() for g in grads.values())


def _weighted_sum(scene, cam, bg, up, delta=None, backend="numba"):
    out = render(scene, cam, bg, None if delta is None else torch.as_tensor(delta), backend=backend)
    return float((out.color * up["color"]).sum() + (out.depth * up["depth"]).sum()
                 + (out.alpha * up["alpha"]).sum())


@pytest.mark.parametrize("backend", ["numba", "torch"])
def test_parameter_gradients_finite_differences(rng, backend):
    scene = random_scene(rng, 5)
    cam, bg = small_camera(16), (0.3, 0.5, 0.2)
    up = {"color": torch.tensor(rng.normal(size=(16, 16, 3))), "depth": torch.tensor(rng.normal(size=(16, 16))),
          "alpha": torch.tensor(rng.normal(size=(16, 16)))}
    grads = render_with_grad(scene, cam, bg, up, backend=backend)
    for name in FIELDS:
        base = scene.tensors()[name].numpy().copy()

        def f(x, name=name):
            s = scene.clone()
            getattr(s, name).copy_(torch.from_numpy(x))
            return _weighted_sum(s, cam, bg, up, backend=backend)

        fd = central_diff(f, base.copy())
        assert rel_err(grads[name].numpy(), fd) < 1e-4, name


def test_pose_gradient_single_gaussian():
    scene = one_gaussian([0.05, -0.1, 0.2], scale=0.3, logit=0.5)
    cam = small_camera(16)
    rng = np.random.default_rng(5)
    up = {"color": torch.tensor(rng.normal(size=(16, 16, 3))), "depth": torch.zeros(16, 16),
          "alpha": torch.tensor(rng.normal(size=(16, 16)))}
    g = render_with_grad(scene, cam, (0.2, 0.2, 0.2), up)["pose"].numpy()
    fd = central_diff(lambda d: _weighted_sum(scene, cam, (0.2, 0.2, 0.2), up, d), np.zeros(6))
    assert rel_err(g, fd) < 1e-4


def test_gsc1_round_trip(tmp_path, rng):
    scene = random_scene(rng, 7).map(lambda t: t.float().double())
    save_scene(scene, tmp_path / "s.json")
    assert (tmp_path / "s.bin").stat().st_size == 7 * 14 * 4
    assert load_scene(tmp_path / "s.json").equals(scene)


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(0, 10, 1, 1, 4, 4)
    with pytest.raises(ValueError):
        Camera(10, 10, 1, 1, 4, 4, near=0)


def test_scaled_camera_size():
    cam = Camera(89.6, 89.6, 32, 32, 64, 64).scaled(0.3)
    assert (cam.width, cam.height) == (19, 19)
