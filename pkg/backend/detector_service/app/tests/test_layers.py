"""
Tests for network building blocks
"""
import numpy as np
import pytest

from app.domain.entities import Mode
from app.domain.exceptions import InvalidArgumentError
from app.domain.layers import (
    AvgFcHead,
    BatchNorm2dLayer,
    ConvMaxHead,
    CustomPart,
    MiniResNet,
    ResidualBlock,
    iter_modules,
)
from app.domain.tensor import Tensor


def module_arrays(module, x):
    """Leaf arrays of a module (parameter values are perturbed in place) plus its input."""
    arrays = {p.path: p.value for p in module.parameters() if not p.frozen}
    arrays["input"] = x
    return arrays


def check_module(gradient_check, module, x, mode=Mode.TRAIN, seed=0):
    arrays = module_arrays(module, x)
    gradient_check(lambda: module(Tensor(x, requires_grad=True, name="input"), mode), arrays, seed)


class TestResidualBlock:
    """Test the basic residual block"""

    def test_zero_main_branch_is_relu_of_input(self, rng):
        """Test identity shortcut with a zeroed main branch gives relu(x)"""
        block = ResidualBlock("b", 3, 3, rng)
        for param in block.parameters():
            if param.path.startswith("b.conv"):
                param.value = np.zeros_like(param.value)
        x = rng.normal(size=(2, 3, 4, 4))
        out = block(Tensor(x), Mode.INFERENCE)
        np.testing.assert_allclose(out.data, np.maximum(x, 0.0))

    def test_projection_only_when_shape_changes(self, rng):
        """Test shortcut is identity unless channels or stride change"""
        assert ResidualBlock("a", 4, 4, rng).proj is None
        assert ResidualBlock("b", 4, 8, rng).proj is not None
        assert ResidualBlock("c", 4, 4, rng, stride=2).proj is not None

    def test_first_conv_only(self, rng):
        """Test a block cut after its first conv has no second conv or shortcut"""
        block = ResidualBlock("b", 2, 4, rng, stride=2, first_conv_only=True)
        assert [p.path for p in block.parameters()] == ["b.conv1.weight", "b.conv1.bias", "b.bn1.gamma", "b.bn1.beta"]
        out = block(Tensor(rng.normal(size=(1, 2, 6, 6))), Mode.TRAIN)
        assert out.shape == (1, 4, 3, 3)
        assert (out.data >= 0).all()

    def test_channel_mismatch(self, rng):
        """Test wrong input channel count is rejected"""
        with pytest.raises(InvalidArgumentError):
            ResidualBlock("b", 3, 3, rng)(Tensor(np.ones((1, 2, 4, 4))), Mode.TRAIN)

    @pytest.mark.parametrize("in_ch,out_ch,stride", [(2, 2, 1), (2, 3, 2)])
    def test_gradients(self, gradient_check, in_ch, out_ch, stride):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            block = ResidualBlock("b", in_ch, out_ch, rng, stride=stride)
            check_module(gradient_check, block, rng.normal(size=(2, in_ch, 4, 4)), seed=seed)


class TestCustomPart:
    """Test the trainable part appended to a fixed extractor"""

    def test_three_repetitions_halve_three_times(self, rng):
        """Test R=3 on 16x16 gives 2x2"""
        part = CustomPart("custom", 3, rng, features=4, repetitions=3)
        out = part(Tensor(rng.normal(size=(2, 3, 16, 16))), Mode.TRAIN)
        assert out.shape == (2, 4, 2, 2)

    def test_zero_repetitions_rejected(self, rng):
        """Test R >= 1"""
        with pytest.raises(InvalidArgumentError):
            CustomPart("custom", 3, rng, repetitions=0)

    def test_input_too_small(self, rng):
        """Test spatial extent must survive every pooling"""
        part = CustomPart("custom", 3, rng, features=4, repetitions=3)
        with pytest.raises(InvalidArgumentError):
            part(Tensor(rng.normal(size=(1, 3, 4, 4))), Mode.TRAIN)

    def test_gradients(self, gradient_check):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            part = CustomPart("custom", 2, rng, features=4, repetitions=1)
            check_module(gradient_check, part, rng.normal(size=(2, 2, 4, 4)), seed=seed)


class TestHeads:
    """Test avg-fc and conv-max heads"""

    def test_avg_fc_zero_weights(self, rng):
        """Test zero FC weights and bias give 0.5 everywhere"""
        head = AvgFcHead("head", 4, 3, rng)
        head.weight.value = np.zeros_like(head.weight.value)
        out = head(Tensor(rng.normal(size=(2, 4, 3, 3))), Mode.INFERENCE)
        np.testing.assert_array_equal(out.data, np.full((2, 3), 0.5))

    def test_conv_max_output_shape(self, rng):
        """Test one score per class"""
        head = ConvMaxHead("head", 4, 5, rng, kernel=3)
        out = head(Tensor(rng.normal(size=(2, 4, 3, 3))), Mode.INFERENCE)
        assert out.shape == (2, 5)
        assert ((out.data > 0) & (out.data < 1)).all()

    def test_heads_reject_wrong_channels(self, rng):
        """Test feature map count must match"""
        with pytest.raises(InvalidArgumentError):
            AvgFcHead("head", 4, 3, rng)(Tensor(np.ones((1, 2, 3, 3))), Mode.TRAIN)

    @pytest.mark.parametrize("head_cls", [AvgFcHead, ConvMaxHead])
    def test_gradients(self, gradient_check, head_cls):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            head = head_cls("head", 3, 2, rng)
            check_module(gradient_check, head, rng.normal(size=(2, 3, 3, 3)), seed=seed)


class TestMiniResNet:
    """Test the residual backbone"""

    def test_default_has_seventeen_conv_layers(self, rng):
        """Test stem + 4 stages x 2 blocks x 2 convs"""
        backbone = MiniResNet("backbone", rng)
        assert backbone.total_conv_layers == 17
        assert len(backbone.conv_layers) == 17
        assert backbone.out_channels == 64

    def test_upto_stops_early(self, rng):
        """Test a cut inside a block returns that conv's activation"""
        backbone = MiniResNet("backbone", rng, upto=6)
        assert len(backbone.conv_layers) == 6
        assert backbone.blocks[-1].first_conv_only
        out = backbone(Tensor(rng.normal(size=(1, 3, 8, 8))), Mode.TRAIN)
        assert out.shape == (1, 16, 4, 4)

    def test_upto_out_of_range(self, rng):
        """Test upto in [1, total]"""
        with pytest.raises(InvalidArgumentError):
            MiniResNet("backbone", rng, upto=18)

    def test_projection_frozen_with_whole_block(self, rng):
        """Test a projection shortcut freezes only when both convs of its block are frozen"""
        backbone = MiniResNet("backbone", rng)
        # block3 holds conv layers 6 and 7 and the first projection
        backbone.freeze_leading(6)
        assert backbone.blocks[2].conv1.frozen and not backbone.blocks[2].conv2.frozen
        assert not backbone.blocks[2].proj.frozen
        backbone.freeze_leading(7)
        assert backbone.blocks[2].proj.frozen and backbone.blocks[2].proj_bn.frozen
        assert not backbone.blocks[3].conv1.frozen

    def test_freeze_zero_leaves_everything_trainable(self, rng):
        backbone = MiniResNet("backbone", rng)
        backbone.freeze_leading(0)
        assert not any(p.frozen for p in backbone.parameters())

    def test_frozen_batch_norm_keeps_running_statistics(self, rng):
        """Test frozen BN runs in inference mode even during training"""
        layer = BatchNorm2dLayer("bn", 2)
        layer.set_frozen(True)
        layer(Tensor(rng.normal(size=(2, 2, 3, 3)) + 5.0), Mode.TRAIN)
        np.testing.assert_array_equal(layer.running.mean, np.zeros(2))
        np.testing.assert_array_equal(layer.running.var, np.ones(2))

    def test_paths_are_unique(self, rng):
        backbone = MiniResNet("backbone", rng)
        paths = [p.path for p in backbone.parameters()] + list(backbone.buffers())
        assert len(paths) == len(set(paths))
        assert all(path.startswith("backbone.") for path in paths)

    def test_iter_modules_visits_every_block(self, rng):
        backbone = MiniResNet("backbone", rng, widths=(4, 8), strides=(1, 2), blocks_per_stage=1)
        assert sum(isinstance(m, ResidualBlock) for m in iter_modules(backbone)) == 2
