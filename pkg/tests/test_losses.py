import numpy as np
import pytest

from deformsplat.deformation import DeformationModel
from deformsplat.errors import ValidationError
from deformsplat.initialization import TrackSet
from deformsplat.losses import (
    LossWeights,
    build_neighbor_graph,
    isometry_loss,
    rendering_loss,
    rigidity_loss,
    rotation_loss,
    total_loss,
    tracking_loss,
)
from deformsplat.scene import quat_normalize, quat_multiply, quat_to_rotmat

from helpers import (
    brute_force_knn,
    fd_gradients,
    gradcheck_camera,
    gradcheck_scene,
    max_rel_error,
    scalar_ssim,
)
from test_renderer import on_axis_camera, single_gaussian


class TestRenderingLoss:
    def test_identical_images_zero(self):
        img = np.random.default_rng(0).uniform(0, 1, (16, 16, 3))
        loss, grad = rendering_loss(img, img, np.zeros((16, 16), bool))
        assert loss == 0.0
        assert np.abs(grad).max() < 1e-15  # fp dust from the SSIM chain

    def test_constant_images_match_scalar_ssim_oracle(self):
        rendered = np.ones((16, 16, 3))
        observed = np.zeros((16, 16, 3))
        loss, _ = rendering_loss(rendered, observed, np.zeros((16, 16), bool), 0.2)
        l1 = 1.0
        dssim = (1.0 - scalar_ssim(rendered, observed)) / 2.0
        assert abs(loss - (0.8 * l1 + 0.2 * dssim)) < 1e-12

    def test_random_images_match_scalar_ssim_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 1, (14, 15, 3))
        b = rng.uniform(0, 1, (14, 15, 3))
        loss, _ = rendering_loss(a, b, np.zeros((14, 15), bool), 0.2)
        l1 = np.abs(a - b).mean()
        dssim = (1.0 - scalar_ssim(a, b)) / 2.0
        assert abs(loss - (0.8 * l1 + 0.2 * dssim)) < 1e-9

    def test_mask_covering_difference_gives_zero(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(0, 1, (16, 16, 3))
        b = a.copy()
        mask = np.zeros((16, 16), bool)
        mask[4:9, 4:9] = True
        b[4:9, 4:9] = rng.uniform(0, 1, (5, 5, 3))
        loss, _ = rendering_loss(a, b, mask)
        assert loss == 0.0

    def test_exact_invariance_to_masked_edits(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(0, 1, (16, 16, 3))
        b = rng.uniform(0, 1, (16, 16, 3))
        mask = np.zeros((16, 16), bool)
        mask[0:6, 10:16] = True
        loss1, grad1 = rendering_loss(a, b, mask)
        a2 = a.copy()
        a2[mask] = rng.uniform(0, 1, (mask.sum(), 3))
        b2 = b.copy()
        b2[mask] = rng.uniform(0, 1, (mask.sum(), 3))
        loss2, grad2 = rendering_loss(a2, b2, mask)
        assert loss1 == loss2
        assert np.array_equal(grad1, grad2)

    def test_all_masked_returns_zero_with_diagnostic(self, caplog):
        img = np.random.default_rng(4).uniform(0, 1, (12, 12, 3))
        loss, grad = rendering_loss(img, img + 0.1, np.ones((12, 12), bool))
        assert loss == 0.0 and np.all(grad == 0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(0.2, 0.8, (13, 13, 3))
        b = rng.uniform(0.2, 0.8, (13, 13, 3))
        mask = np.zeros((13, 13), bool)
        mask[2, 3] = True
        _, grad = rendering_loss(a, b, mask)
        fd = fd_gradients(lambda: rendering_loss(a, b, mask)[0], {"a": a}, h=1e-6)
        assert max_rel_error(grad, fd["a"], floor=1e-4) < 1e-5

    def test_nonnegative(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            a = rng.uniform(0, 1, (12, 12, 3))
            b = rng.uniform(0, 1, (12, 12, 3))
            loss, _ = rendering_loss(a, b, np.zeros((12, 12), bool))
            assert loss >= 0.0


class TestNeighborGraph:
    def test_two_points(self):
        pts = np.array([[0.0, 0, 0], [0.01, 0, 0]])
        graph = build_neighbor_graph(pts, 8, 2000.0)
        assert graph.idx.shape == (2, 1)
        assert graph.idx[0, 0] == 1 and graph.idx[1, 0] == 0
        assert np.allclose(graph.weights, np.exp(-2000.0 * 0.0001))

    def test_coincident_points_weight_one(self):
        pts = np.zeros((3, 3))
        graph = build_neighbor_graph(pts, 1, 2000.0)
        assert np.allclose(graph.weights, 1.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        pts = rng.normal(size=(100, 3))
        graph = build_neighbor_graph(pts, 8, 2000.0)
        expected = brute_force_knn(pts, 8)
        assert np.array_equal(graph.idx, expected)

    def test_rejects_single_point(self):
        with pytest.raises(ValidationError):
            build_neighbor_graph(np.zeros((1, 3)), 8, 2000.0)


def random_states(rng, n=20):
    pos_c = rng.normal(size=(n, 3))
    quat_c = quat_normalize(rng.normal(size=(n, 4)))
    pos_t = pos_c + 0.1 * rng.normal(size=(n, 3))
    quat_t = quat_normalize(quat_c + 0.05 * rng.normal(size=(n, 4)))
    return pos_c, quat_c, pos_t, quat_t


def scalar_physics_reference(graph, pos_c, quat_c, pos_t, quat_t):
    """Plain-loop evaluation of all three weighted double sums."""
    n, k = graph.idx.shape
    r_c = [quat_to_rotmat(quat_c[i]) for i in range(n)]
    r_t = [quat_to_rotmat(quat_t[i]) for i in range(n)]
    rigid = rot = iso = 0.0
    for i in range(n):
        delta_r = r_t[i] @ r_c[i].T
        rel_i = quat_multiply(quat_t[i], np.array([quat_c[i][0], *(-quat_c[i][1:])]))
        if rel_i[0] < 0:
            rel_i = -rel_i
        for col in range(k):
            j = int(graph.idx[i, col])
            w = float(graph.weights[i, col])
            e_c = pos_c[j] - pos_c[i]
            e_t = pos_t[j] - pos_t[i]
            rigid += w * float(np.linalg.norm(e_t - delta_r @ e_c))
            rel_j = quat_multiply(quat_t[j], np.array([quat_c[j][0], *(-quat_c[j][1:])]))
            if rel_j[0] < 0:
                rel_j = -rel_j
            rot += w * float(np.sum((rel_j - rel_i) ** 2))
            iso += w * abs(float(np.linalg.norm(e_c)) - float(np.linalg.norm(e_t)))
    return rigid / n, rot / n, iso / n


class TestPhysicsLosses:
    def test_zero_when_deformed_equals_canonical(self):
        rng = np.random.default_rng(8)
        pos_c, quat_c, _, _ = random_states(rng)
        graph = build_neighbor_graph(pos_c, 4, 2.0)
        # q q^-1 and R R^T leave a few ulps of rounding noise
        assert rigidity_loss(graph, pos_c, quat_c, pos_c, quat_c)[0] < 1e-12
        assert rotation_loss(graph, quat_c, quat_c)[0] < 1e-12
        assert isometry_loss(graph, pos_c, pos_c)[0] == 0.0

    @pytest.mark.parametrize("seed", range(3))
    def test_invariant_under_global_rigid_transform(self, seed):
        rng = np.random.default_rng(seed)
        pos_c, quat_c, _, _ = random_states(rng, n=50)
        graph = build_neighbor_graph(pos_c, 6, 2.0)
        q_star = quat_normalize(rng.normal(size=4))
        r_star = quat_to_rotmat(q_star)
        t_star = rng.normal(size=3)
        pos_t = pos_c @ r_star.T + t_star
        quat_t = quat_multiply(np.tile(q_star, (len(quat_c), 1)), quat_c)
        assert rigidity_loss(graph, pos_c, quat_c, pos_t, quat_t)[0] <= 1e-9
        assert rotation_loss(graph, quat_c, quat_t)[0] <= 1e-9
        assert isometry_loss(graph, pos_c, pos_t)[0] <= 1e-9

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(9)
        pos_c, quat_c, pos_t, quat_t = random_states(rng, n=15)
        graph = build_neighbor_graph(pos_c, 5, 2.0)
        rigid_ref, rot_ref, iso_ref = scalar_physics_reference(
            graph, pos_c, quat_c, pos_t, quat_t)
        assert abs(rigidity_loss(graph, pos_c, quat_c, pos_t, quat_t)[0] - rigid_ref) < 1e-12
        assert abs(rotation_loss(graph, quat_c, quat_t)[0] - rot_ref) < 1e-12
        assert abs(isometry_loss(graph, pos_c, pos_t)[0] - iso_ref) < 1e-12

    def test_uniform_scaling_isometry_value(self):
        # two points at distance d, scaled by 2: per-pair residual is d
        pts = np.array([[0.0, 0, 0], [0.3, 0, 0]])
        graph = build_neighbor_graph(pts, 1, 2000.0)
        loss, _ = isometry_loss(graph, pts, 2.0 * pts)
        w = float(np.exp(-2000.0 * 0.09))
        assert abs(loss - (2 * w * 0.3) / 2) < 1e-12

    def test_rotation_two_gaussian_hand_value(self):
        from helpers import quat_from_axis_angle
        quat_c = np.stack([np.array([1.0, 0, 0, 0]), np.array([1.0, 0, 0, 0])])
        qa = quat_from_axis_angle([0, 0, 1], 10.0)
        qb = quat_from_axis_angle([0, 0, 1], 30.0)
        quat_t = np.stack([qa, qb])
        pts = np.array([[0.0, 0, 0], [0.01, 0, 0]])
        graph = build_neighbor_graph(pts, 1, 0.0)  # weights 1
        loss, _ = rotation_loss(graph, quat_c, quat_t)
        expected = 2 * float(np.sum((qb - qa) ** 2)) / 2
        assert abs(loss - expected) < 1e-12

    def test_gradients_match_finite_differences(self):
        # finite differences act on raw quaternions; analytic gradients on
        # the unit quaternions are chained through normalization
        rng = np.random.default_rng(10)
        n = 8
        raw_c = rng.normal(size=(n, 4))
        raw_t = rng.normal(size=(n, 4))
        pos_c = rng.normal(size=(n, 3))
        pos_t = pos_c + 0.2 * rng.normal(size=(n, 3))
        graph = build_neighbor_graph(pos_c, 3, 1.0)

        def scalar():
            qc = quat_normalize(raw_c)
            qt = quat_normalize(raw_t)
            return (rigidity_loss(graph, pos_c, qc, pos_t, qt)[0]
                    + rotation_loss(graph, qc, qt)[0]
                    + isometry_loss(graph, pos_c, pos_t)[0])

        def chain_to_raw(raw, grad_unit):
            norm = np.linalg.norm(raw, axis=1, keepdims=True)
            qhat = raw / norm
            inner = np.sum(grad_unit * qhat, axis=1, keepdims=True)
            return (grad_unit - qhat * inner) / norm

        qc = quat_normalize(raw_c)
        qt = quat_normalize(raw_t)
        g1 = rigidity_loss(graph, pos_c, qc, pos_t, qt)[1]
        g2 = rotation_loss(graph, qc, qt)[1]
        g3 = isometry_loss(graph, pos_c, pos_t)[1]
        grad_pos_c = g1["pos_c"] + g3["pos_c"]
        grad_pos_t = g1["pos_t"] + g3["pos_t"]
        grad_raw_c = chain_to_raw(raw_c, g1["quat_c"] + g2["quat_c"])
        grad_raw_t = chain_to_raw(raw_t, g1["quat_t"] + g2["quat_t"])

        fd = fd_gradients(scalar, {
            "pos_c": pos_c, "pos_t": pos_t, "raw_c": raw_c, "raw_t": raw_t,
        }, h=1e-5)
        assert max_rel_error(grad_pos_c, fd["pos_c"]) < 1e-4
        assert max_rel_error(grad_pos_t, fd["pos_t"]) < 1e-4
        assert max_rel_error(grad_raw_c, fd["raw_c"]) < 1e-4
        assert max_rel_error(grad_raw_t, fd["raw_t"]) < 1e-4


def make_track_scene(rng, n=3):
    """Well-separated opaque Gaussians whose centers land on pixels."""
    cam = on_axis_camera()
    zs = np.array([4.0, 5.0, 6.0])[:n]
    pix = np.array([[20.0, 20.0], [44.0, 24.0], [30.0, 44.0]])[:n]
    positions = cam.backproject(pix, zs)
    g = single_gaussian(positions[0], scale=0.25, opacity_logit=8.0)
    import deformsplat.sh as sh
    colors = np.zeros((n, 3, 1))
    colors[:, :, 0] = sh.rgb_to_sh0(rng.uniform(0.3, 0.7, (n, 3)))
    from deformsplat.scene import GaussianSet
    g = GaussianSet(
        positions=positions,
        rot_params=np.tile([1.0, 0, 0, 0], (n, 1)),
        log_scales=np.full((n, 3), np.log(0.25)),
        opacity_logits=np.full(n, 8.0),
        colors=colors,
    )
    return g, cam, pix


class TestTrackingLoss:
    def test_static_scene_zero_loss(self):
        rng = np.random.default_rng(12)
        g, cam, pix = make_track_scene(rng)
        d = DeformationModel.zero_init(g.count, 4)
        tracks = TrackSet(
            query_pixels=pix,
            positions=np.repeat(pix[:, None, :], 3, axis=1),
            visibility=np.ones((3, 3), bool),
        )
        loss, _ = tracking_loss(g, d, cam, cam, 0.0, 1.0, tracks, 2)
        assert loss < 1e-9

    def test_known_translation_matches_hand_projection(self):
        rng = np.random.default_rng(13)
        g, cam, pix = make_track_scene(rng, n=1)
        d = DeformationModel.zero_init(1, 1)
        d.centers["position"][:] = 1.0
        delta = np.array([0.3, -0.2, 0.5])
        d.weights["position"][0, 0] = delta
        # hand projection of the moved center
        moved = g.positions[0] + delta
        expected_uv, _ = cam.project(moved[None])
        tracks = TrackSet(
            query_pixels=pix[:1],
            positions=np.repeat(pix[:1, None, :], 2, axis=1),
            visibility=np.ones((1, 2), bool),
        )
        loss, _ = tracking_loss(g, d, cam, cam, 0.0, 1.0, tracks, 1)
        expected_loss = float(np.abs(expected_uv[0] - pix[0]).sum())
        assert abs(loss - expected_loss) < 1e-6

    def test_no_visible_tracks_zero(self):
        rng = np.random.default_rng(14)
        g, cam, pix = make_track_scene(rng)
        d = DeformationModel.zero_init(g.count, 4)
        tracks = TrackSet(
            query_pixels=pix,
            positions=np.repeat(pix[:, None, :], 2, axis=1),
            visibility=np.zeros((3, 2), bool),
        )
        loss, grads = tracking_loss(g, d, cam, cam, 0.0, 1.0, tracks, 1)
        assert loss == 0.0

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(15)
        g, cam, pix = make_track_scene(rng)
        d = DeformationModel.zero_init(g.count, 2)
        d.weights["position"][:] = rng.normal(size=d.weights["position"].shape) * 0.1
        d.weights["rotation"][:] = rng.normal(size=d.weights["rotation"].shape) * 0.05
        # offset targets so residuals stay away from the L1 kink
        targets = pix + rng.uniform(1.0, 3.0, pix.shape)
        positions = np.stack([pix, targets], axis=1)
        tracks = TrackSet(query_pixels=pix, positions=positions,
                          visibility=np.ones((3, 2), bool))

        def scalar():
            return tracking_loss(g, d, cam, cam, 0.0, 1.0, tracks, 1)[0]

        _, grads = tracking_loss(g, d, cam, cam, 0.0, 1.0, tracks, 1)
        arrays = {
            "positions": g.positions,
            "opacity_logits": g.opacity_logits,
            "w_pos": d.weights["position"],
            "c_pos": d.centers["position"],
        }
        fd = fd_gradients(scalar, arrays, h=1e-4)
        assert max_rel_error(grads["gaussians"]["positions"], fd["positions"]) < 1e-4
        assert max_rel_error(grads["gaussians"]["opacity_logits"], fd["opacity_logits"]) < 1e-4
        assert max_rel_error(grads["deformation"]["weights"]["position"], fd["w_pos"]) < 1e-4
        assert max_rel_error(grads["deformation"]["centers"]["position"], fd["c_pos"]) < 1e-4


class TestTotalLoss:
    def test_all_zero(self):
        assert total_loss({"rgb": 0.0, "track": 0.0}, LossWeights()) == 0.0

    def test_single_term_paper_weight(self):
        assert total_loss({"rgb": 0.5}, LossWeights()) == 0.5

    def test_linearity_in_weights(self):
        rng = np.random.default_rng(11)
        terms = {k: float(rng.uniform(0, 1)) for k in ("rgb", "track", "rigid", "rot", "iso")}
        base = LossWeights()
        doubled = LossWeights(lambda_track=base.lambda_track * 2)
        diff = total_loss(terms, doubled) - total_loss(terms, base)
        assert abs(diff - base.lambda_track * terms["track"]) < 1e-15
