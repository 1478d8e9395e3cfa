"""Tests for the OmniContext encoder."""

import pytest
import torch

from drrnet.config import TINY_STAGE_CHANNELS
from drrnet.context_encoder import OmniContextBlock, OmniContextEncoder
from drrnet.errors import IncompletePyramid, ResolutionMismatch


@pytest.fixture
def encoder():
    return OmniContextEncoder(TINY_STAGE_CHANNELS, width=32).eval()


def tiny_pyramid(batch=2, size=64):
    return [torch.randn(batch, c, size // s, size // s) for c, s in zip(TINY_STAGE_CHANNELS, (4, 8, 16, 32))]


class TestOmniContextBlock:
    """Tests for a single context block."""

    def test_scale_weights_form_convex_combination(self):
        """The three per-pixel scale weights are nonnegative and sum to one."""
        block = OmniContextBlock(16, 8).double().eval()
        x = torch.randn(2, 16, 12, 12, dtype=torch.float64)

        weights = block.scale_weights(block.branches(x))

        assert weights.shape == (2, 3, 12, 12)
        assert (weights >= 0).all()
        torch.testing.assert_close(weights.sum(dim=1), torch.ones(2, 12, 12, dtype=torch.float64), atol=1e-10, rtol=0)

    def test_branches_at_medium_resolution(self):
        """All branch features are rescaled to the input resolution."""
        block = OmniContextBlock(16, 8).eval()
        feats = block.branches(torch.randn(1, 16, 10, 14))
        assert [tuple(f.shape) for f in feats] == [(1, 8, 10, 14)] * 3

    def test_one_hot_attention_selects_large_branch(self):
        """Attention pinned to the large branch gives SE(f_l) plus the residual."""
        block = OmniContextBlock(16, 8).eval()
        with torch.no_grad():
            block.scale_logits.weight.zero_()
            block.scale_logits.bias.copy_(torch.tensor([40.0, -40.0, -40.0]))
        x = torch.randn(2, 16, 12, 12)

        with torch.no_grad():
            out = block(x)
            expected = block.se(block.branches(x)[0]) + block.residual(x)

        torch.testing.assert_close(out, expected, atol=1e-6, rtol=1e-6)

    def test_equal_branches_collapse(self):
        """With identical branch features the fused map equals any one of them."""
        block = OmniContextBlock(8, 8).double().eval()
        feat = torch.randn(1, 8, 6, 6, dtype=torch.float64)
        feats = [feat, feat.clone(), feat.clone()]

        fused = block.fuse(feats, block.scale_weights(feats))

        torch.testing.assert_close(fused, feat)

    def test_add_fusion(self):
        """The addition variant keeps the output contract."""
        block = OmniContextBlock(16, 8, fusion="add").eval()
        assert block(torch.randn(1, 16, 8, 8)).shape == (1, 8, 8, 8)

    def test_gradient_reaches_every_branch(self):
        """All three branch convolutions receive gradient."""
        block = OmniContextBlock(16, 8)
        block(torch.randn(2, 16, 12, 12)).pow(2).mean().backward()

        for branch in (block.large, block.medium, block.small):
            assert branch.conv.weight.grad.abs().max() > 0


class TestOmniContextEncoder:
    """Tests for the top-down context stack."""

    def test_level_four_shape(self, encoder):
        """The deepest level maps x4 to the working width."""
        g4 = encoder.ocm_forward(4, torch.randn(2, 128, 12, 12))
        assert g4.shape == (2, 32, 12, 12)

    def test_pyramid_outputs(self, encoder):
        """Every level keeps its resolution and has C channels."""
        outputs = encoder(tiny_pyramid())
        assert [tuple(g.shape) for g in outputs] == [
            (2, 32, 16, 16),
            (2, 32, 8, 8),
            (2, 32, 4, 4),
            (2, 32, 2, 2),
        ]

    def test_missing_deeper_input(self, encoder):
        """Levels below the top need the deeper output."""
        with pytest.raises(ResolutionMismatch):
            encoder.ocm_forward(2, torch.randn(1, 32, 8, 8))

    def test_unexpected_deeper_input_at_top(self, encoder):
        """The top level takes no deeper input."""
        with pytest.raises(ResolutionMismatch):
            encoder.ocm_forward(4, torch.randn(1, 128, 2, 2), torch.randn(1, 32, 1, 1))

    def test_deeper_input_wrong_resolution(self, encoder):
        """The deeper input must be exactly one level below."""
        with pytest.raises(ResolutionMismatch):
            encoder.ocm_forward(3, torch.randn(1, 64, 8, 8), torch.randn(1, 32, 8, 8))

    def test_incomplete_pyramid(self, encoder):
        """Three levels are not enough."""
        with pytest.raises(IncompletePyramid):
            encoder(tiny_pyramid()[:3])
