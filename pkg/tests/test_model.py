"""Block composition, shape contracts, and model-level gradients."""

import numpy as np
import pytest

from osteonet import tensor as T
from osteonet.errors import ConfigError, ShapeMismatchError, SpatialCollapseError
from osteonet.gradcheck import grad_check
from osteonet.model import (
    BackboneSpec,
    ConvBlockSpec,
    ModelConfig,
    StageSpec,
    build_backbone,
    classification_head,
    enhancement_stack,
    expected_shapes,
    init_model_state,
    model_forward,
    predict,
    residual_block,
)
from osteonet.rng import Rng


def t64(data, requires_grad=False):
    return T.Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad,
                    dtype=np.float64)


class TestResidualBlock:
    def _params(self, ch, rng, zero_f_path=False):
        scale = 0.0 if zero_f_path else 0.3
        return {
            "blk.conv1.W": t64(rng.gen.standard_normal((3, 3, ch, ch)) * scale, True),
            "blk.conv1.b": t64(np.zeros(ch), True),
            "blk.conv2.W": t64(rng.gen.standard_normal((3, 3, ch, ch)) * scale, True),
            "blk.conv2.b": t64(np.zeros(ch), True),
        }

    def test_zero_f_path_is_bitwise_identity(self):
        rng = Rng(1)
        params = self._params(3, rng, zero_f_path=True)
        for _ in range(20):
            x = t64(rng.gen.standard_normal((1, 5, 5, 3)))
            out = residual_block(x, params, "blk")
            assert np.array_equal(out.data, x.data)

    def test_zero_input_zero_bias_gives_zeros(self):
        rng = Rng(2)
        params = self._params(2, rng)
        x = t64(np.zeros((1, 4, 4, 2)))
        out = residual_block(x, params, "blk")
        assert np.all(out.data == 0.0)

    def test_gradients_match_finite_differences(self):
        rng = Rng(3)
        params = self._params(2, rng)
        x = t64(rng.gen.uniform(-1, 1, (1, 4, 4, 2)))
        tensors = list(params.values())
        err = grad_check(lambda: T.tensor_sum(residual_block(x, params, "blk")), tensors)
        assert err < 1e-4

    def test_projection_shortcut_changes_channels(self):
        rng = Rng(4)
        params = {
            "blk.conv1.W": t64(rng.gen.standard_normal((3, 3, 2, 4)) * 0.3, True),
            "blk.conv1.b": t64(np.zeros(4), True),
            "blk.conv2.W": t64(rng.gen.standard_normal((3, 3, 4, 4)) * 0.3, True),
            "blk.conv2.b": t64(np.zeros(4), True),
            "blk.proj.W": t64(rng.gen.standard_normal((1, 1, 2, 4)) * 0.3, True),
            "blk.proj.b": t64(np.zeros(4), True),
        }
        out = residual_block(t64(rng.gen.standard_normal((1, 6, 6, 2))), params, "blk", stride=2)
        assert out.shape == (1, 3, 3, 4)


class TestBackbone:
    def test_default_spec_tap_shape(self):
        config = ModelConfig.default()
        rng = Rng(5)
        params, forward = build_backbone(config.backbone, rng)
        x = T.Tensor(np.zeros((2, 224, 224, 3), dtype=np.float32))
        assert forward(x).shape == (2, 56, 56, 64)

    def test_zero_input_zero_bias_gives_zero_feature_map(self):
        spec = BackboneSpec(stem_channels=2,
                            stages=(StageSpec(1, 2, True),), tap_stage=0)
        rng = Rng(6)
        params, forward = build_backbone(spec, rng, in_channels=1)
        out = forward(T.Tensor(np.zeros((1, 8, 8, 1), dtype=np.float32)))
        assert np.all(out.data == 0.0)

    def test_reduced_spec_tap_shape(self):
        config = ModelConfig.reduced()
        rng = Rng(7)
        params, forward = build_backbone(config.backbone, rng)
        x = T.Tensor(np.zeros((1, 64, 64, 3), dtype=np.float32))
        assert forward(x).shape == (1, 32, 32, 8)

    def test_invalid_tap_stage_rejected(self):
        with pytest.raises(ConfigError):
            BackboneSpec(stages=(StageSpec(1, 4, True),), tap_stage=1)

    def test_decreasing_channels_rejected(self):
        with pytest.raises(ConfigError):
            BackboneSpec(stages=(StageSpec(1, 8, True), StageSpec(1, 4, False)), tap_stage=0)


class TestEnhancementStack:
    def test_default_spatial_chain_56_to_1(self):
        config = ModelConfig.default()
        rng = Rng(8)
        state = init_model_state(config, rng)
        x = T.Tensor(np.zeros((1, 56, 56, 64), dtype=np.float32))
        out = enhancement_stack(x, config.stack, state.params, "eval")
        assert out.shape == (1, 1, 1, 512)

    def test_eval_mode_is_deterministic(self):
        config = ModelConfig.reduced()
        rng = Rng(9)
        state = init_model_state(config, rng)
        x = T.Tensor(rng.gen.standard_normal((1, 32, 32, 8)).astype(np.float32))
        a = enhancement_stack(x, config.stack, state.params, "eval", dropout_p=0.5)
        b = enhancement_stack(x, config.stack, state.params, "eval", dropout_p=0.5)
        assert np.array_equal(a.data, b.data)

    def test_matches_hand_composed_primitives(self):
        rng = Rng(10)
        stack = tuple(ConvBlockSpec(f) for f in (4, 6, 8))
        params = {}
        ch = 4
        for i, blk in enumerate(stack):
            params[f"stack.block{i}.W"] = t64(
                rng.gen.standard_normal((3, 3, ch, blk.filters)) * 0.2, True)
            params[f"stack.block{i}.b"] = t64(rng.gen.standard_normal(blk.filters) * 0.1, True)
            ch = blk.filters
        x = t64(rng.gen.standard_normal((1, 32, 32, 4)))
        got = enhancement_stack(x, stack, params, "eval", dropout_p=0.0)

        h = x
        for i in range(3):
            h = T.maxpool2d(T.relu(T.conv2d(h, params[f"stack.block{i}.W"],
                                            params[f"stack.block{i}.b"], padding="same")), 2, 2)
        np.testing.assert_allclose(got.data, h.data, atol=1e-6)
        assert got.shape == (1, 4, 4, 8)

    def test_spatial_collapse_raises(self):
        stack = tuple(ConvBlockSpec(2) for _ in range(3))
        params = {}
        ch = 1
        rng = Rng(11)
        for i in range(3):
            params[f"stack.block{i}.W"] = t64(rng.gen.standard_normal((3, 3, ch, 2)), True)
            params[f"stack.block{i}.b"] = t64(np.zeros(2), True)
            ch = 2
        x = t64(np.zeros((1, 4, 4, 1)))  # 4 -> 2 -> 1 -> collapse
        with pytest.raises(SpatialCollapseError):
            enhancement_stack(x, stack, params, "eval", dropout_p=0.0)


class TestClassificationHead:
    def _zero_head(self, din, units, classes, dtype=np.float32):
        z = lambda *s: T.Tensor(np.zeros(s, dtype=dtype), requires_grad=True, dtype=dtype)
        return {
            "head.fc1.W": z(din, units), "head.fc1.b": z(units),
            "head.fc2.W": z(units, units), "head.fc2.b": z(units),
            "head.out.W": z(units, classes), "head.out.b": z(classes),
        }

    def test_zero_weights_sigmoid_gives_half(self):
        params = self._zero_head(8, 4, 2)
        x = T.Tensor(np.ones((3, 2, 2, 2), dtype=np.float32))
        out = classification_head(x, params, "eval", activation="sigmoid")
        assert np.all(out.data == 0.5)

    def test_zero_weights_softmax_gives_uniform_thirds(self):
        params = self._zero_head(8, 4, 3)
        x = T.Tensor(np.ones((2, 2, 2, 2), dtype=np.float32))
        out = classification_head(x, params, "eval", activation="softmax")
        np.testing.assert_allclose(out.data, 1.0 / 3.0, atol=1e-7)

    def test_gradcheck_through_loss(self):
        # near-identity weights and lifted biases keep every ReLU strictly
        # active, so central differences stay valid at eps=1e-3
        rng = Rng(12)
        units = 8

        def ident(din, dout):
            w = rng.gen.uniform(-1e-3, 1e-3, (din, dout))
            for j in range(dout):
                w[j % din, j] += 1.0
            return t64(w, True)

        params = {
            "head.fc1.W": ident(8, units),
            "head.fc1.b": t64(np.full(units, 0.3), True),
            "head.fc2.W": ident(units, units),
            "head.fc2.b": t64(np.full(units, 0.3), True),
            "head.out.W": t64(rng.gen.uniform(-0.3, 0.3, (units, 2)), True),
            "head.out.b": t64(np.zeros(2), True),
        }
        x = t64(rng.gen.uniform(0.1, 1.0, (2, 2, 2, 2)))
        labels = t64(np.eye(2)[[0, 1]])

        def f():
            probs = classification_head(x, params, "eval", activation="sigmoid", dropout_p=0.0)
            return T.binary_cross_entropy(probs, labels)

        assert grad_check(f, list(params.values())) < 1e-4


class TestPredict:
    def test_argmax(self):
        assert predict(np.array([[0.2, 0.8]]))[0] == 1

    def test_tie_breaks_low(self):
        assert predict(np.array([[0.5, 0.5]]))[0] == 0

    def test_matches_logit_argmax_through_sigmoid(self):
        rng = Rng(13)
        logits = rng.gen.standard_normal((20, 3))
        probs = T.sigmoid(t64(logits))
        np.testing.assert_array_equal(predict(probs), logits.argmax(axis=1))


class TestModelForward:
    def test_default_config_output_shape(self):
        config = ModelConfig.default()
        state = init_model_state(config, Rng(14))
        batch = T.Tensor(np.zeros((2, 224, 224, 3), dtype=np.float32))
        out = model_forward(config, state, batch, "eval")
        assert out.shape == (2, 2)

    def test_shape_contract(self):
        tap, feat, probs = expected_shapes(ModelConfig.default(), batch=4)
        assert tap == (4, 56, 56, 64)
        assert feat == (4, 1, 1, 512)
        assert probs == (4, 2)

    def test_eval_mode_repeat_calls_bitwise_identical(self):
        config = ModelConfig.reduced()
        state = init_model_state(config, Rng(15))
        rng = Rng(16)
        batch = T.Tensor(rng.gen.random((2, 64, 64, 3)).astype(np.float32))
        a = model_forward(config, state, batch, "eval")
        b = model_forward(config, state, batch, "eval")
        assert np.array_equal(a.data, b.data)

    def test_wrong_batch_shape_rejected(self):
        config = ModelConfig.reduced()
        state = init_model_state(config, Rng(17))
        with pytest.raises(ShapeMismatchError):
            model_forward(config, state, T.Tensor(np.zeros((1, 32, 32, 3), dtype=np.float32)))

    def test_small_full_model_gradcheck(self):
        # 16px, 3-pool variant keeps this unit test quick; the acceptance
        # suite runs the 64px reduced profile
        config = ModelConfig(
            input_shape=(16, 16, 3),
            backbone=BackboneSpec(stem_channels=2,
                                  stages=(StageSpec(1, 2, False), StageSpec(1, 3, False)),
                                  tap_stage=1),
            stack=tuple(ConvBlockSpec(3) for _ in range(3)),
            head_units=4,
            head_dropout=0.0,
            stack_dropout=0.0,
            num_classes=2,
            output_activation="sigmoid",
        )
        from osteonet.gradcheck import model_grad_check, prepare_model_check

        _, _, _, margins = prepare_model_check(config, seed=18)
        assert margins[0] > 0.05 and margins[1] > 1e-3
        assert model_grad_check(config, seed=18) < 1e-4


class TestConfigValidation:
    def test_sigmoid_requires_two_classes(self):
        with pytest.raises(ConfigError):
            ModelConfig(num_classes=3, output_activation="sigmoid")

    def test_batchnorm_flag_is_reserved(self):
        with pytest.raises(ConfigError):
            ModelConfig(use_batchnorm=True)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            ConvBlockSpec(8, kernel=4)
