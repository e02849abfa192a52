"""Tests for network specs, model construction, and the four forward modes."""

import numpy as np
import pytest

from pimvar.network import (
    CLEAN,
    MODES,
    PERTURBED_ONLY,
    QUANT_ONLY,
    QUANT_PERTURBED,
    LayerSpec,
    Model,
    NetworkSpec,
    build_lenet5,
    build_smallconvnet,
    build_tinynet,
    forward,
    init_model,
    predictions,
    refresh_stats,
)
from pimvar.quantization import calibrate_activations, dequant_values
from pimvar.variability import (
    MODEL_LAYER_FIXED,
    MODEL_WEIGHT_PROPORTIONAL,
    ChipInstance,
    VariabilityConfig,
    sample_chip,
)


def linear_only_spec(weight_bits=4):
    """flatten -> linear: raw MVM reaches the logits untouched by pooling or
    activation quantizers, so deployment algebra is directly visible."""
    layers = (
        LayerSpec("flatten", "flat"),
        LayerSpec("linear", "fc", in_features=4, out_features=3, weight_bits=weight_bits),
    )
    return NetworkSpec("single", (1, 2, 2), 3, layers)


def make_calibrated(spec, seed=0, dtype=np.float64, batches=None):
    model = init_model(spec, seed=seed, dtype=dtype)
    model.compute_weight_configs()
    if batches is None:
        rng = np.random.default_rng(seed + 1)
        batches = [rng.standard_normal((4, *spec.input_shape))]
    if model.activation_sites():
        model.act_configs = calibrate_activations(model, batches)
    refresh_stats(model, quantized=True)
    return model


class TestLayerSpec:
    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            LayerSpec("dropout", "d1")

    def test_bit_range_enforced(self):
        with pytest.raises(ValueError):
            LayerSpec("linear", "fc", in_features=2, out_features=2, weight_bits=1)
        with pytest.raises(ValueError):
            LayerSpec("relu", "r", activation_bits=20)

    def test_weight_shapes(self):
        conv = LayerSpec("conv2d", "c", in_channels=3, out_channels=8, kernel=5)
        assert conv.weight_shape() == (8, 3, 5, 5)
        lin = LayerSpec("linear", "f", in_features=10, out_features=4)
        assert lin.weight_shape() == (4, 10)
        with pytest.raises(ValueError):
            LayerSpec("relu", "r").weight_shape()


class TestNetworkSpec:
    def test_builders_validate(self):
        for spec in (build_lenet5(), build_smallconvnet(), build_tinynet()):
            assert spec.validate_shapes() == (spec.n_classes,)

    def test_label(self):
        assert build_lenet5().label == "A2W2"
        assert build_lenet5(activation_bits=4, weight_bits=3).label == "A4W3"
        assert build_tinynet().label == "A4W2"

    def test_channel_mismatch_rejected(self):
        layers = (
            LayerSpec("conv2d", "c1", in_channels=3, out_channels=4, kernel=3),
            LayerSpec("flatten", "f"),
            LayerSpec("linear", "fc", in_features=144, out_features=2),
        )
        with pytest.raises(ValueError, match="c1"):
            NetworkSpec("bad", (1, 8, 8), 2, layers)

    def test_linear_feature_mismatch_rejected(self):
        layers = (
            LayerSpec("flatten", "f"),
            LayerSpec("linear", "fc", in_features=99, out_features=2),
        )
        with pytest.raises(ValueError, match="fc"):
            NetworkSpec("bad", (1, 8, 8), 2, layers)

    def test_pool_tiling_rejected(self):
        layers = (
            LayerSpec("maxpool", "p", size=3),
            LayerSpec("flatten", "f"),
            LayerSpec("linear", "fc", in_features=1, out_features=2),
        )
        with pytest.raises(ValueError, match="p"):
            NetworkSpec("bad", (1, 8, 8), 2, layers)

    def test_wrong_output_count_rejected(self):
        layers = (
            LayerSpec("flatten", "f"),
            LayerSpec("linear", "fc", in_features=4, out_features=3),
        )
        with pytest.raises(ValueError, match="emits"):
            NetworkSpec("bad", (1, 2, 2), 5, layers)

    def test_duplicate_names_rejected(self):
        layers = (
            LayerSpec("relu", "r"),
            LayerSpec("relu", "r"),
            LayerSpec("flatten", "f"),
            LayerSpec("linear", "fc", in_features=4, out_features=2),
        )
        with pytest.raises(ValueError, match="duplicate"):
            NetworkSpec("bad", (1, 2, 2), 2, layers)

    def test_lenet_weight_layers(self):
        names = [l.name for l in build_lenet5().weight_layers()]
        assert names == ["conv1", "conv2", "fc1", "fc2", "fc3"]


class TestModelConstruction:
    def test_init_deterministic(self):
        a = init_model(build_tinynet(), seed=3)
        b = init_model(build_tinynet(), seed=3)
        c = init_model(build_tinynet(), seed=4)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
        assert not np.array_equal(a.params["conv1.w"].data, c.params["conv1.w"].data)

    def test_biases_start_at_zero(self):
        model = init_model(build_tinynet(), seed=0)
        np.testing.assert_array_equal(model.params["fc1.b"].data, np.zeros(2))

    def test_parameter_shapes_follow_spec(self):
        model = init_model(build_lenet5(), seed=0)
        assert model.params["conv1.w"].data.shape == (6, 1, 5, 5)
        assert model.params["fc1.w"].data.shape == (120, 400)
        assert model.params["fc3.b"].data.shape == (10,)

    def test_weight_bits_map(self):
        model = init_model(build_lenet5(weight_bits=3), seed=0)
        assert model.weight_bits() == {n: 3 for n in ("conv1", "conv2", "fc1", "fc2", "fc3")}

    def test_activation_sites(self):
        model = init_model(build_lenet5(), seed=0)
        assert model.activation_sites() == {f"relu{i}": 2 for i in range(1, 5)}

    def test_zero_grad_clears(self):
        model = make_calibrated(build_tinynet())
        from pimvar.autograd import backward, softmax_cross_entropy

        x = np.zeros((2, 1, 8, 8))
        backward(softmax_cross_entropy(forward(model, x, CLEAN), np.array([0, 1])))
        assert model.params["fc1.w"].grad is not None
        model.zero_grad()
        assert all(p.grad is None for p in model.parameters().values())

    def test_cast_preserves_configs(self):
        model = make_calibrated(build_tinynet())
        m32 = model.cast(np.float32)
        assert m32.dtype == np.float32
        assert m32.weight_configs == model.weight_configs
        assert m32.act_configs == model.act_configs
        assert m32.params["fc1.w"].data.dtype == np.float32


class TestForwardModes:
    def test_unknown_mode_rejected(self):
        model = make_calibrated(build_tinynet())
        with pytest.raises(ValueError, match="unknown forward mode"):
            forward(model, np.zeros((1, 1, 8, 8)), "training")

    def test_perturbed_modes_require_chip(self):
        model = make_calibrated(build_tinynet())
        for mode in (QUANT_PERTURBED, PERTURBED_ONLY):
            with pytest.raises(ValueError, match="chip"):
                forward(model, np.zeros((1, 1, 8, 8)), mode)

    def test_st_only_in_deployment_mode(self):
        model = make_calibrated(build_tinynet())
        with pytest.raises(ValueError, match="correction"):
            forward(model, np.zeros((1, 1, 8, 8)), CLEAN, st=object())

    def test_quant_modes_need_configs(self):
        model = init_model(build_tinynet(), seed=0)
        with pytest.raises(ValueError, match="quantizer"):
            forward(model, np.zeros((1, 1, 8, 8)), QUANT_ONLY)

    def test_logit_shapes(self):
        model = make_calibrated(build_tinynet())
        out = forward(model, np.zeros((5, 1, 8, 8)), CLEAN)
        assert out.data.shape == (5, 2)
        assert predictions(model, np.zeros((5, 1, 8, 8)), CLEAN).shape == (5,)

    def test_quantization_changes_clean_output(self):
        model = make_calibrated(build_tinynet())
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 1, 8, 8))
        clean = forward(model, x, CLEAN).data
        quant = forward(model, x, QUANT_ONLY).data
        assert not np.allclose(clean, quant)

    def test_zero_deviation_chip_matches_quant_only_bitwise(self):
        """A chip with both deviation components at zero deploys exactly the
        quantized network: perturbation must contribute literal zeros."""
        model = make_calibrated(build_tinynet())
        chip = sample_chip(VariabilityConfig(), seed=5)
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 1, 8, 8))
        a = forward(model, x, QUANT_ONLY).data
        b = forward(model, x, QUANT_PERTURBED, chip=chip).data
        np.testing.assert_array_equal(a, b)

    def test_forward_does_not_mutate_stats(self):
        model = make_calibrated(build_tinynet())
        chip = sample_chip(VariabilityConfig(sigma_w=0.3, sigma_b=0.2), seed=6)
        before = dict(model.stats.w_max)
        forward(model, np.zeros((2, 1, 8, 8)), QUANT_PERTURBED, chip=chip)
        assert model.stats.w_max == before

    def test_same_chip_same_output_across_batches(self):
        model = make_calibrated(build_tinynet())
        cfg = VariabilityConfig(sigma_w=0.4, sigma_b=0.2)
        chip = sample_chip(cfg, seed=7)
        x = np.random.default_rng(2).standard_normal((2, 1, 8, 8))
        a = forward(model, x, QUANT_PERTURBED, chip=chip).data
        b = forward(model, x, QUANT_PERTURBED, chip=chip).data
        np.testing.assert_array_equal(a, b)
        fresh = sample_chip(cfg, seed=7)
        c = forward(model, x, QUANT_PERTURBED, chip=fresh).data
        np.testing.assert_array_equal(a, c)


class TestDeploymentAlgebra:
    """Single-MVM networks make the deviation algebra exactly checkable."""

    def test_value_proportional_offset_scales_outputs(self):
        """With only the shared offset active, every raw MVM output is the
        quantized output times (1 + eps_b)."""
        model = make_calibrated(linear_only_spec())
        cfg = VariabilityConfig(model=MODEL_WEIGHT_PROPORTIONAL, sigma_w=0.0, sigma_b=0.4)
        chip = ChipInstance(seed=3, config=cfg)
        x = np.random.default_rng(4).standard_normal((5, 1, 2, 2))
        base = forward(model, x, QUANT_ONLY).data
        pert = forward(model, x, QUANT_PERTURBED, chip=chip).data
        np.testing.assert_allclose(pert, base * (1.0 + chip.eps_b), rtol=1e-12)

    def test_fixed_scale_offset_shifts_by_row_sum(self):
        """Fixed-scale deviations with no within-chip noise add
        eps_b * w_max * sum(x) to every output component."""
        model = make_calibrated(linear_only_spec())
        cfg = VariabilityConfig(model=MODEL_LAYER_FIXED, sigma_w=0.0, sigma_b=0.4)
        chip = ChipInstance(seed=8, config=cfg)
        x = np.random.default_rng(5).standard_normal((5, 1, 2, 2))
        base = forward(model, x, QUANT_ONLY).data
        pert = forward(model, x, QUANT_PERTURBED, chip=chip).data
        w_max = model.stats["fc"]
        shift = chip.eps_b * w_max * x.reshape(5, -1).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(pert, base + shift, rtol=1e-12)

    def test_stats_match_dequantized_max(self):
        model = make_calibrated(linear_only_spec())
        w = model.params["fc.w"].data
        deq = dequant_values(w, model.weight_configs["fc"])
        np.testing.assert_allclose(model.stats["fc"], np.max(np.abs(deq)))

    def test_refresh_stats_full_precision(self):
        model = make_calibrated(linear_only_spec())
        refresh_stats(model, quantized=False)
        np.testing.assert_allclose(
            model.stats["fc"], np.max(np.abs(model.params["fc.w"].data))
        )


class TestRecording:
    def test_record_activation_sites(self):
        model = make_calibrated(build_tinynet())
        rec = model.record_activations(np.zeros((2, 1, 8, 8)))
        assert set(rec) == {"relu1"}
        assert rec["relu1"].shape == (2, 4, 8, 8)

    def test_modes_constant_tuple(self):
        assert MODES == ("clean", "quant_only", "quant_perturbed", "perturbed_only")
