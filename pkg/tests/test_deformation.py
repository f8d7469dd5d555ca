import math

import numpy as np
import pytest

from deformsplat.deformation import (
    CHANNELS,
    GROUPS,
    DeformationModel,
    deform,
    deform_backward,
    eval_basis,
)
from deformsplat.errors import ValidationError
from deformsplat.scene import activate

from helpers import fd_gradients, max_rel_error, scalar_offset
from test_scene import simple_set


def random_model(rng, n, b=3) -> DeformationModel:
    weights, centers, widths = {}, {}, {}
    for grp in GROUPS:
        weights[grp] = rng.normal(size=(n, b, CHANNELS[grp])) * 0.3
        centers[grp] = rng.uniform(0.0, 1.0, (n, b))
        widths[grp] = rng.uniform(0.15, 0.5, (n, b))
    return DeformationModel(weights=weights, centers=centers, widths=widths)


class TestEvalBasis:
    def test_peak_at_center(self):
        assert eval_basis(0.4, np.array([0.4]), np.array([0.2]))[0] == 1.0

    def test_one_sigma_point(self):
        val = eval_basis(0.5, np.array([0.3]), np.array([0.2]))[0]
        assert abs(val - math.exp(-0.5)) < 1e-12

    def test_two_center_formula(self):
        vals = eval_basis(0.5, np.array([0.2, 0.8]), np.array([0.3, 0.3]))
        assert np.allclose(vals, math.exp(-0.5 * (0.3 / 0.3) ** 2))

    def test_out_of_range_clamps_with_warning(self):
        with pytest.warns(UserWarning):
            val = eval_basis(1.5, np.array([1.0]), np.array([0.2]))
        assert val[0] == 1.0

    def test_nonpositive_width_rejected(self):
        with pytest.raises(ValidationError):
            eval_basis(0.5, np.array([0.5]), np.array([0.0]))


class TestDeform:
    def test_zero_weights_identity(self):
        rng = np.random.default_rng(0)
        g = simple_set(n=4, positions=rng.normal(size=(4, 3)))
        d = DeformationModel.zero_init(4, basis_count=5)
        out = deform(g, d, 0.37)
        assert np.array_equal(out.positions, g.positions)
        assert np.array_equal(out.rot_params, g.rot_params)
        assert np.array_equal(out.log_scales, g.log_scales)
        assert np.array_equal(out.opacity_logits, g.opacity_logits)

    def test_single_basis_position_shift(self):
        g = simple_set(n=1)
        d = DeformationModel.zero_init(1, basis_count=1)
        d.centers["position"][:] = 0.5
        d.weights["position"][0, 0, 0] = 1.0
        out = deform(g, d, 0.5)
        assert np.allclose(out.positions[0], [1.0, 0.0, 0.0])

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(1)
        g = simple_set(n=3, positions=rng.normal(size=(3, 3)))
        d = random_model(rng, 3, b=2)
        for t in (0.0, 0.21, 0.5, 0.77, 1.0):
            out = deform(g, d, t)
            for n in range(3):
                for c in range(3):
                    expected = g.positions[n, c] + scalar_offset(
                        t, d.weights["position"][n, :, c],
                        d.centers["position"][n], d.widths["position"][n])
                    assert abs(out.positions[n, c] - expected) < 1e-12
                expected_o = g.opacity_logits[n] + scalar_offset(
                    t, d.weights["opacity"][n, :, 0],
                    d.centers["opacity"][n], d.widths["opacity"][n])
                assert abs(out.opacity_logits[n] - expected_o) < 1e-12

    def test_offsets_additive_in_weights(self):
        rng = np.random.default_rng(2)
        g = simple_set(n=2)
        d1 = random_model(rng, 2)
        d2 = random_model(rng, 2)
        # same bases, summed weights
        d2 = DeformationModel(
            weights={grp: d1.weights[grp] * 1.7 for grp in GROUPS},
            centers=d1.centers, widths=d1.widths)
        dsum = DeformationModel(
            weights={grp: d1.weights[grp] + d2.weights[grp] for grp in GROUPS},
            centers=d1.centers, widths=d1.widths)
        t = 0.4
        off1 = deform(g, d1, t).positions - g.positions
        off2 = deform(g, d2, t).positions - g.positions
        off_sum = deform(g, dsum, t).positions - g.positions
        assert np.allclose(off_sum, off1 + off2, atol=1e-15)

    def test_opacity_stays_in_unit_interval(self):
        rng = np.random.default_rng(3)
        g = simple_set(n=2, opacity_logits=np.array([4.0, -4.0]))
        d = random_model(rng, 2)
        d.weights["opacity"][:] *= 20.0
        for t in np.linspace(0, 1, 11):
            act = activate(deform(g, d, t))
            assert np.all(act.opacities > 0) and np.all(act.opacities < 1)

    def test_continuity_in_time(self):
        rng = np.random.default_rng(4)
        g = simple_set(n=3)
        d = random_model(rng, 3)
        t = 0.5
        a = deform(g, d, t)
        b = deform(g, d, t + 1e-6)
        for field in ("positions", "rot_params", "log_scales", "opacity_logits"):
            assert np.abs(getattr(a, field) - getattr(b, field)).max() < 1e-3

    def test_size_mismatch_rejected(self):
        g = simple_set(n=2)
        d = DeformationModel.zero_init(3)
        with pytest.raises(ValidationError):
            deform(g, d, 0.5)


class TestDeformBackward:
    def test_unit_upstream_at_peak(self):
        g = simple_set(n=1)
        d = DeformationModel.zero_init(1, basis_count=1)
        d.centers["position"][:] = 0.3
        up = {"positions": np.array([[1.0, 0.0, 0.0]])}
        canon, dgrads = deform_backward(g, d, 0.3, up)
        assert canon["positions"][0, 0] == 1.0
        assert dgrads["weights"]["position"][0, 0, 0] == 1.0  # b(t) = 1 at the center
        assert dgrads["centers"]["position"][0, 0] == 0.0     # stationary point

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        g = simple_set(n=3, positions=rng.normal(size=(3, 3)))
        d = random_model(rng, 3)
        t = 0.37
        w_pos = rng.normal(size=(3, 3))
        w_rot = rng.normal(size=(3, 4))
        w_scale = rng.normal(size=(3, 3))
        w_op = rng.normal(size=3)

        def scalar():
            out = deform(g, d, t)
            return float((w_pos * out.positions).sum() + (w_rot * out.rot_params).sum()
                         + (w_scale * out.log_scales).sum()
                         + (w_op * out.opacity_logits).sum())

        canon, dgrads = deform_backward(g, d, t, {
            "positions": w_pos, "rot_params": w_rot,
            "log_scales": w_scale, "opacity_logits": w_op,
        })
        arrays = {}
        for grp in GROUPS:
            arrays[f"w.{grp}"] = d.weights[grp]
            arrays[f"c.{grp}"] = d.centers[grp]
            arrays[f"s.{grp}"] = d.widths[grp]
        fd = fd_gradients(scalar, arrays, h=1e-5)
        for grp in GROUPS:
            assert max_rel_error(dgrads["weights"][grp], fd[f"w.{grp}"]) < 1e-4
            assert max_rel_error(dgrads["centers"][grp], fd[f"c.{grp}"]) < 1e-4
            assert max_rel_error(dgrads["widths"][grp], fd[f"s.{grp}"]) < 1e-4
        fd_can = fd_gradients(scalar, {"positions": g.positions}, h=1e-5)
        assert max_rel_error(canon["positions"], fd_can["positions"]) < 1e-6
