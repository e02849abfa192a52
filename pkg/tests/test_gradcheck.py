"""Tests for finite-difference gradient verification, including the
quantizer-boundary skipping that keeps central differences meaningful."""

import numpy as np
import pytest

from pimvar.autograd import Tensor, add_bias, matmul, relu, softmax_cross_entropy
from pimvar.gradcheck import GradCheckReport, boundary_distance, check_gradients
from pimvar.network import build_tinynet, forward, init_model, refresh_stats
from pimvar.quantization import QuantConfig, calibrate_activations, fake_quant


class TestBoundaryDistance:
    def test_mid_cell_is_far(self):
        cfg = QuantConfig(4, 1.0)
        np.testing.assert_allclose(boundary_distance(1.0, cfg), 0.5)
        np.testing.assert_allclose(boundary_distance(0.0, cfg), 0.5)

    def test_on_boundary_is_zero(self):
        cfg = QuantConfig(4, 1.0)
        np.testing.assert_allclose(boundary_distance(0.5, cfg), 0.0)
        np.testing.assert_allclose(boundary_distance(-1.5, cfg), 0.0)

    def test_scales_with_quantizer_scale(self):
        cfg = QuantConfig(4, 0.2)
        np.testing.assert_allclose(boundary_distance(0.2, cfg), 0.1)

    def test_saturated_values_grow_with_depth(self):
        """Past the clip point there is no more boundary to cross."""
        cfg = QuantConfig(2, 1.0)
        assert boundary_distance(3.0, cfg) == pytest.approx(2.5)
        assert boundary_distance(10.0, cfg) > boundary_distance(3.0, cfg)


class TestCheckGradients:
    def test_mlp_passes(self):
        rng = np.random.default_rng(0)
        params = {
            "w1": Tensor(rng.standard_normal((6, 4)) * 0.5, requires_grad=True),
            "b1": Tensor(np.zeros(4), requires_grad=True),
            "w2": Tensor(rng.standard_normal((4, 3)) * 0.5, requires_grad=True),
        }
        x = rng.standard_normal((5, 6))
        labels = rng.integers(0, 3, 5)

        def loss_fn():
            h = relu(add_bias(matmul(Tensor(x), params["w1"]), params["b1"]))
            return softmax_cross_entropy(matmul(h, params["w2"]), labels)

        report = check_gradients(loss_fn, params, rng=np.random.default_rng(1))
        assert report.ok
        assert report.max_rel_error < 1e-4
        assert report.n_checked > 0
        assert set(report.per_param) == {"w1", "b1", "w2"}

    def test_empty_params_empty_report(self):
        report = check_gradients(lambda: None, {})
        assert isinstance(report, GradCheckReport)
        assert report.n_checked == 0
        assert report.max_rel_error == 0.0
        assert report.ok

    def test_boundary_elements_are_skipped(self):
        """Elements parked on a rounding boundary are reported, not failed."""
        cfg = QuantConfig(4, 1.0)
        w = Tensor(np.array([0.5, 1.5, 2.5, -0.5]), requires_grad=True)

        def loss_fn():
            from pimvar.autograd import tsum

            return tsum(fake_quant(w, cfg))

        report = check_gradients(
            loss_fn, {"w": w}, quant_configs={"w": cfg}, rng=np.random.default_rng(0)
        )
        assert report.n_skipped_boundary == 4
        assert report.n_checked == 0
        assert report.boundary_skipped == {"w": 4}

    def test_off_boundary_elements_all_checked(self):
        cfg = QuantConfig(4, 1.0)
        w = Tensor(np.array([0.2, 1.1, -2.2, 0.9]), requires_grad=True)

        def loss_fn():
            from pimvar.autograd import tsum

            return tsum(fake_quant(w, cfg))

        report = check_gradients(
            loss_fn, {"w": w}, h=1e-5, quant_configs={"w": cfg}, rng=np.random.default_rng(0)
        )
        assert report.n_skipped_boundary == 0
        assert report.n_checked == 4

    def test_straight_through_disagrees_with_staircase(self):
        """The staircase is locally flat off-boundary while the
        straight-through gradient is 1, so the checker must flag it: it
        verifies true derivatives, not surrogate ones."""
        cfg = QuantConfig(4, 1.0)
        w = Tensor(np.array([0.2, 1.1]), requires_grad=True)

        def loss_fn():
            from pimvar.autograd import tsum

            return tsum(fake_quant(w, cfg))

        report = check_gradients(loss_fn, {"w": w}, quant_configs={"w": cfg})
        assert not report.ok

    def test_whole_network_gradients(self):
        """End-to-end check on the small conv net in clean mode."""
        model = init_model(build_tinynet(), seed=0, dtype=np.float64)
        model.compute_weight_configs()
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 1, 8, 8))
        model.act_configs = calibrate_activations(model, [x])
        refresh_stats(model, quantized=False)
        labels = np.array([0, 1])

        def loss_fn():
            logits = forward(model, x, "clean")
            return softmax_cross_entropy(logits, labels)

        report = check_gradients(loss_fn, model.params, rng=np.random.default_rng(3))
        assert report.ok, report.per_param
