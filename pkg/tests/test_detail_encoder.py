"""Tests for the MicroDetail encoder."""

import pytest
import torch

from drrnet.config import TINY_STAGE_CHANNELS
from drrnet.detail_encoder import MicroDetailBlock, MicroDetailEncoder
from drrnet.errors import IncompletePyramid, ResolutionMismatch
from drrnet.layers import DepthwiseSeparableConv


@pytest.fixture
def block():
    return MicroDetailBlock(8, 8).eval()


class TestMicroDetailBlock:
    """Tests for a single detail block."""

    def test_aspp_branch_shape(self, block):
        """The ASPP path keeps the width and resolution."""
        assert block.aspp_branch(torch.randn(1, 8, 12, 12)).shape == (1, 8, 12, 12)

    def test_dw_branch_shape(self, block):
        """The depthwise path keeps the width and resolution."""
        assert block.dw_branch(torch.randn(1, 8, 12, 12)).shape == (1, 8, 12, 12)

    def test_aspp_zero_input(self, block):
        """Zero input gives zero output without biases."""
        with torch.no_grad():
            out = block.aspp_branch(torch.zeros(1, 8, 12, 12))
        assert torch.count_nonzero(out) == 0

    def test_rate_seven_impulse(self, block):
        """A dilation-7 kernel responds only at offsets 0 and +-7."""
        conv = block.dilated[3].conv
        with torch.no_grad():
            conv.weight.fill_(1.0)
            x = torch.zeros(1, 8, 17, 17)
            x[0, 0, 8, 8] = 1.0
            response = conv(x)[0, 0]

        rows, cols = torch.nonzero(response, as_tuple=True)
        positions = set(zip(rows.tolist(), cols.tolist()))
        assert positions == {(8 + dy, 8 + dx) for dy in (-7, 0, 7) for dx in (-7, 0, 7)}

    def test_aspp_receptive_field(self, block):
        """The composite ASPP path sees at least 15 pixels across."""
        with torch.no_grad():
            for layer in block.dilated:
                layer.conv.weight.fill_(1.0 / 9)
            block.aspp_reduce.conv.weight.fill_(0.1)
            x = torch.zeros(1, 8, 17, 17)
            x[0, :, 8, 8] = 1.0
            response = block.aspp_branch(x)[0, 0]

        cols = torch.nonzero(response[8]).flatten()
        assert int(cols.max() - cols.min()) + 1 >= 15

    def test_constant_field_ignores_dilation(self, block):
        """On a constant field every dilation rate agrees away from the border."""
        with torch.no_grad():
            for layer in block.dilated:
                layer.conv.weight.fill_(1.0)
            x = torch.full((1, 8, 17, 17), 0.5)
            centers = [layer(x)[0, :, 8, 8] for layer in block.dilated]

        for center in centers[1:]:
            torch.testing.assert_close(center, centers[0])

    def test_fusion_pinned_to_zero_returns_x0(self, block):
        """With the final CBR silenced the output is the adjusted input."""
        with torch.no_grad():
            block.fuse.conv.weight.zero_()
            x = torch.randn(2, 8, 12, 12)
            torch.testing.assert_close(block(x), block.adjust(x))

    @pytest.mark.parametrize("path", ["aspp_reduce", "dw_reduce"])
    def test_both_paths_contribute(self, block, path):
        """Silencing either path changes the output."""
        x = torch.randn(2, 8, 12, 12)
        with torch.no_grad():
            reference = block(x)
            getattr(block, path).conv.weight.zero_()
            silenced = block(x)
        assert not torch.allclose(reference, silenced)

    def test_add_fusion(self):
        """The addition variant keeps the output contract."""
        block = MicroDetailBlock(16, 8, fusion="add").eval()
        assert block(torch.randn(1, 16, 8, 8)).shape == (1, 8, 8, 8)


class TestDepthwiseSeparableConv:
    """Tests for the depthwise-separable convolution."""

    def test_depthwise_mixes_no_channels(self):
        """An impulse on channel 0 stays on channel 0 before the pointwise stage."""
        conv = DepthwiseSeparableConv(8, 8, 5)
        with torch.no_grad():
            conv.depthwise.bias.zero_()
            x = torch.zeros(1, 8, 9, 9)
            x[0, 0, 4, 4] = 1.0
            out = conv.depthwise(x)

        assert torch.count_nonzero(out[0, 1:]) == 0
        assert torch.count_nonzero(out[0, 0]) > 0

    def test_parameter_count(self):
        """A 7x7 separable conv at 32 channels has the closed-form parameter count."""
        conv = DepthwiseSeparableConv(32, 32, 7)
        expected = 7 * 7 * 32 + 32 + 32 * 32 + 32
        assert sum(p.numel() for p in conv.parameters()) == expected


class TestMicroDetailEncoder:
    """Tests for the top-down detail stack."""

    def test_level_four_shape(self):
        """The deepest level maps x4 to the working width."""
        encoder = MicroDetailEncoder(TINY_STAGE_CHANNELS, width=32).eval()
        assert encoder.mdm_forward(4, torch.randn(2, 128, 12, 12)).shape == (2, 32, 12, 12)

    def test_pyramid_outputs(self):
        """Every level keeps its resolution."""
        encoder = MicroDetailEncoder(TINY_STAGE_CHANNELS, width=8).eval()
        pyramid = [torch.randn(1, c, 32 // s, 32 // s) for c, s in zip(TINY_STAGE_CHANNELS, (2, 4, 8, 16))]
        outputs = encoder(pyramid)
        assert [tuple(o.shape) for o in outputs] == [(1, 8, 16, 16), (1, 8, 8, 8), (1, 8, 4, 4), (1, 8, 2, 2)]

    def test_resolution_mismatch(self):
        """A deeper input at the wrong size is rejected."""
        encoder = MicroDetailEncoder(TINY_STAGE_CHANNELS, width=8)
        with pytest.raises(ResolutionMismatch):
            encoder.mdm_forward(1, torch.randn(1, 16, 16, 16), torch.randn(1, 8, 4, 4))

    def test_incomplete_pyramid(self):
        """A pyramid needs four levels."""
        with pytest.raises(IncompletePyramid):
            MicroDetailEncoder(TINY_STAGE_CHANNELS, width=8)([])
