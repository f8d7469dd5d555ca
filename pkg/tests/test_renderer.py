import numpy as np
import pytest

from deformsplat import sh
from deformsplat.renderer import (
    COV2D_REG,
    ProjectedScene,
    project,
    render,
    render_backward,
    render_oracle,
)
from deformsplat.scene import Camera, GaussianSet, logit

from helpers import fd_gradients, gradcheck_camera, gradcheck_scene, max_rel_error
from test_scene import simple_set


def on_axis_camera():
    return Camera(fx=100.0, fy=100.0, cx=32.0, cy=32.0, width=64, height=64,
                  rotation=np.eye(3), translation=np.zeros(3))


def random_blend_scene(seed, n=100):
    """Random compact splats at 32x32, used for oracle-agreement checks."""
    cam = Camera(fx=40.0, fy=40.0, cx=15.5, cy=15.5, width=32, height=32,
                 rotation=np.eye(3), translation=np.zeros(3))
    rng = np.random.default_rng(seed)
    colors = np.zeros((n, 3, 1))
    colors[:, :, 0] = sh.rgb_to_sh0(rng.uniform(0, 1, (n, 3)))
    g = GaussianSet(
        positions=np.stack([rng.uniform(-1.5, 1.5, n), rng.uniform(-1.5, 1.5, n),
                            rng.uniform(2.0, 6.0, n)], axis=1),
        rot_params=rng.normal(size=(n, 4)),
        log_scales=np.log(rng.uniform(0.02, 0.12, (n, 3))),
        opacity_logits=rng.uniform(-1.0, 3.0, n),
        colors=colors,
    )
    return g, cam


def single_gaussian(pos, scale=1.0, opacity_logit=12.0, rgb=(1.0, 0.0, 0.0)):
    colors = np.zeros((1, 3, 1))
    colors[0, :, 0] = sh.rgb_to_sh0(np.asarray(rgb, dtype=float))
    return GaussianSet(
        positions=np.array([pos], dtype=float),
        rot_params=np.array([[1.0, 0, 0, 0]]),
        log_scales=np.full((1, 3), np.log(scale)),
        opacity_logits=np.array([opacity_logit]),
        colors=colors,
    )


class TestProject:
    def test_on_axis_projection(self):
        cam = on_axis_camera()
        proj = project(single_gaussian([0.0, 0.0, 5.0]), cam)
        assert proj.count == 1
        assert np.allclose(proj.mean2d[0], [32.0, 32.0])
        assert np.isclose(proj.view_depth[0], 5.0)

    def test_isotropic_cov2d_formula(self):
        # symbolic evaluation of J W Sigma W^T J^T for the on-axis case
        cam = on_axis_camera()
        s, z = 0.2, 4.0
        proj = project(single_gaussian([0.0, 0.0, z], scale=s), cam)
        expected = (cam.fx * s / z) ** 2
        assert np.allclose(proj.cov2d[0, 0, 0], expected + COV2D_REG, rtol=1e-12)
        assert np.allclose(proj.cov2d[0, 1, 1], expected + COV2D_REG, rtol=1e-12)
        assert abs(proj.cov2d[0, 0, 1]) < 1e-12

    def test_behind_camera_culled(self):
        proj = project(single_gaussian([0.0, 0.0, -5.0]), on_axis_camera())
        assert proj.count == 0

    def test_outside_image_culled(self):
        proj = project(single_gaussian([50.0, 0.0, 5.0], scale=0.1), on_axis_camera())
        assert proj.count == 0


class TestRender:
    def test_single_opaque_gaussian(self):
        cam = on_axis_camera()
        g = single_gaussian([0.0, 0.0, 5.0], scale=8.0, opacity_logit=14.0)
        out = render(project(g, cam), cam)
        opaque = out.alpha > 0.999
        assert opaque.sum() > 100
        assert np.abs(out.color[opaque] - [1.0, 0.0, 0.0]).max() < 2e-3
        # blended depth divided by alpha recovers the view depth exactly
        covered = out.alpha > 0.9
        assert np.abs(out.depth[covered] / out.alpha[covered] - 5.0).max() < 1e-6

    def test_empty_scene(self):
        cam = on_axis_camera()
        g = single_gaussian([0.0, 0.0, -1.0])
        out = render(project(g, cam), cam)
        assert np.all(out.color == 0.0)
        assert np.all(out.alpha == 0.0)

    def test_two_term_alpha_blend(self):
        # both Gaussians centered on the same pixel, alphas equal to their
        # opacities there; hand evaluation of the two-term blend
        cam = on_axis_camera()
        front = single_gaussian([0.0, 0.0, 4.0], scale=2.0, opacity_logit=0.0,
                                rgb=(1.0, 0.0, 0.0))
        sig_back = 1.0 / (1.0 + np.exp(-6.0))
        back = single_gaussian([0.0, 0.0, 8.0], scale=4.0, opacity_logit=6.0,
                               rgb=(0.0, 0.0, 1.0))
        g = GaussianSet(
            positions=np.concatenate([front.positions, back.positions]),
            rot_params=np.concatenate([front.rot_params, back.rot_params]),
            log_scales=np.concatenate([front.log_scales, back.log_scales]),
            opacity_logits=np.concatenate([front.opacity_logits, back.opacity_logits]),
            colors=np.concatenate([front.colors, back.colors]),
        )
        out = render(project(g, cam), cam)
        expected = np.array([0.5, 0.0, 0.5 * sig_back])
        assert np.abs(out.color[32, 32] - expected).max() < 1e-9

    def test_alpha_monotone_in_opacity(self):
        cam = on_axis_camera()
        rng = np.random.default_rng(11)
        g = gradcheck_scene(rng, n=6)
        base = render(project(g, cam), cam).alpha.sum()
        logits = g.opacity_logits.copy()
        logits[2] += 0.5
        g2 = GaussianSet(g.positions, g.rot_params, g.log_scales, logits, g.colors)
        boosted = render(project(g2, cam), cam).alpha
        base_map = render(project(g, cam), cam).alpha
        assert np.all(boosted - base_map >= -1e-12)
        assert boosted.sum() > base

    def test_deterministic(self):
        cam = gradcheck_camera()
        rng = np.random.default_rng(3)
        g = gradcheck_scene(rng, n=8)
        a = render(project(g, cam), cam)
        b = render(project(g, cam), cam)
        assert np.array_equal(a.color, b.color)
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.alpha, b.alpha)


class TestOracleEquivalence:
    def test_identical_when_no_cutoffs_apply(self):
        # wide, mild Gaussians: every alpha stays above the floor at every
        # pixel and transmittance never hits the termination threshold
        cam = gradcheck_camera()
        rng = np.random.default_rng(5)
        n = 4
        colors = np.zeros((n, 3, 1))
        colors[:, :, 0] = sh.rgb_to_sh0(rng.uniform(0.2, 0.8, (n, 3)))
        g = GaussianSet(
            positions=np.stack([rng.uniform(-0.1, 0.1, n), rng.uniform(-0.1, 0.1, n),
                                rng.uniform(2.8, 3.2, n)], axis=1),
            rot_params=rng.normal(size=(n, 4)),
            log_scales=np.log(rng.uniform(0.8, 1.2, (n, 3))),
            opacity_logits=np.full(n, logit(0.4)),
            colors=colors,
        )
        proj = project(g, cam)
        fast = render(proj, cam)
        slow = render_oracle(proj, cam)
        assert np.abs(fast.color - slow.color).max() < 1e-6
        assert np.abs(fast.depth - slow.depth).max() < 1e-6
        assert np.abs(fast.alpha - slow.alpha).max() < 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_random_scenes_within_alpha_cutoff_bound(self, seed):
        g, cam = random_blend_scene(seed)
        proj = project(g, cam)
        fast = render(proj, cam)
        slow = render_oracle(proj, cam)
        assert np.abs(fast.color - slow.color).max() <= 2.0 / 255.0

    def test_empty(self):
        cam = gradcheck_camera()
        g = single_gaussian([0, 0, -1.0])
        out = render_oracle(project(g, cam), cam)
        assert np.all(out.color == 0)


def scene_scalar(g, cam, wc, wd, wa, wx=None, payload=None):
    proj = project(g, cam, payload3d=payload)
    modes = ("color", "depth") if payload is None else ("color", "depth", "trajectory")
    out = render(proj, cam, modes=modes)
    val = float((wc * out.color).sum() + (wd * out.depth).sum() + (wa * out.alpha).sum())
    if wx is not None:
        val += float((wx * out.trajectory).sum())
    return val


class TestRenderBackward:
    def test_color_gradient_is_coverage_fraction(self):
        cam = on_axis_camera()
        g = single_gaussian([0.0, 0.0, 3.0], scale=30.0, opacity_logit=16.0)
        proj = project(g, cam)
        out = render(proj, cam)
        h, w = out.alpha.shape
        grad_color = np.zeros((h, w, 3))
        grad_color[:, :, 0] = 1.0 / (h * w)  # mean red channel
        grads = render_backward(proj, cam, grad_color=grad_color)
        coverage = out.alpha.mean()
        assert coverage > 0.99
        assert abs(grads["colors"][0, 0, 0] - coverage * sh.SH_C0) < 1e-6

    def test_fully_occluded_gaussian_gets_zero_gradient(self):
        # the occluder is wide enough that transmittance drops below the
        # termination floor over the hidden Gaussian's whole footprint
        cam = on_axis_camera()
        front = single_gaussian([0.0, 0.0, 3.0], scale=60.0, opacity_logit=20.0)
        hidden = single_gaussian([0.0, 0.0, 6.0], scale=0.3, rgb=(0, 1, 0))
        g = GaussianSet(
            positions=np.concatenate([front.positions, hidden.positions]),
            rot_params=np.concatenate([front.rot_params, hidden.rot_params]),
            log_scales=np.concatenate([front.log_scales, hidden.log_scales]),
            opacity_logits=np.concatenate([front.opacity_logits, hidden.opacity_logits]),
            colors=np.concatenate([front.colors, hidden.colors]),
        )
        proj = project(g, cam)
        grads = render_backward(proj, cam, grad_color=np.ones((64, 64, 3)))
        assert np.all(grads["colors"][1] == 0.0)
        assert np.all(grads["positions"][1] == 0.0)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradients_match_finite_differences(self, seed):
        cam = gradcheck_camera()
        rng = np.random.default_rng(seed)
        g = gradcheck_scene(rng, n=5)
        payload = rng.normal(size=(5, 3))
        wc = rng.normal(size=(16, 16, 3))
        wd = rng.normal(size=(16, 16)) * 0.1
        wa = rng.normal(size=(16, 16)) * 0.1
        wx = rng.normal(size=(16, 16, 3)) * 0.1

        proj = project(g, cam, payload3d=payload)
        grads = render_backward(proj, cam, grad_color=wc, grad_depth=wd,
                                grad_alpha=wa, grad_trajectory=wx)

        arrays = {
            "positions": g.positions, "rot_params": g.rot_params,
            "log_scales": g.log_scales, "opacity_logits": g.opacity_logits,
            "colors": g.colors, "payload3d": payload,
        }
        fd = fd_gradients(lambda: scene_scalar(g, cam, wc, wd, wa, wx, payload),
                          arrays, h=1e-4)
        for name in arrays:
            err = max_rel_error(grads[name], fd[name], floor=1e-3)
            assert err < 1e-4, f"{name}: rel err {err:.2e}"

    def test_sh_degree1_gradients(self):
        cam = gradcheck_camera()
        rng = np.random.default_rng(9)
        g = gradcheck_scene(rng, n=3, sh_coeffs=4)
        wc = rng.normal(size=(16, 16, 3))
        proj = project(g, cam)
        grads = render_backward(proj, cam, grad_color=wc)
        arrays = {"positions": g.positions, "colors": g.colors}
        fd = fd_gradients(lambda: scene_scalar(g, cam, wc, np.zeros((16, 16)),
                                               np.zeros((16, 16))), arrays, h=1e-4)
        for name in arrays:
            err = max_rel_error(grads[name], fd[name], floor=1e-3)
            assert err < 1e-4, f"{name}: rel err {err:.2e}"
