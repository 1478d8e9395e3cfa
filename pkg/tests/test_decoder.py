"""Tests for the rough decoder, the reverse refinement cascade and the full network."""

import pytest
import torch
import torch.nn.functional as F

from drrnet.config import ModelConfig
from drrnet.decoder import DualReverseRefinement, GlobalRoughDecoder, PredictionSet, RefinementDecoder, gelu_gate
from drrnet.errors import IncompletePyramid, InvalidResolution, ResolutionMismatch
from drrnet.network import DRRNet, build_model
from drrnet.objective import total_loss


def zero_parameters(module: torch.nn.Module) -> None:
    with torch.no_grad():
        for param in module.parameters():
            param.zero_()


class TestPredictionSet:
    """Tests for PredictionSet."""

    def test_requires_five_levels(self):
        """Four logit maps are not a complete prediction set."""
        with pytest.raises(IncompletePyramid):
            PredictionSet([torch.zeros(1, 1, 2, 2)] * 4)

    def test_level_order(self):
        """level(0) is the finest map and level(4) the coarse one."""
        logits = [torch.full((1, 1, 2**k, 2**k), float(k)) for k in range(1, 6)]
        predictions = PredictionSet(logits)

        assert predictions.level(4) is logits[0]
        assert predictions.final is logits[-1]
        assert predictions.resolutions == [(2, 2), (4, 4), (8, 8), (16, 16), (32, 32)]

    def test_probabilities_resized(self):
        """Probabilities can be taken at another size."""
        predictions = PredictionSet([torch.zeros(1, 1, 4, 4)] * 5)
        probs = predictions.probabilities(2, size=(10, 6))
        assert probs.shape == (1, 1, 10, 6)
        assert torch.all(probs == 0.5)

    def test_level_out_of_range(self):
        """Only levels 0..4 exist."""
        with pytest.raises(ValueError):
            PredictionSet([torch.zeros(1, 1, 2, 2)] * 5).level(5)


class TestGlobalRoughDecoder:
    """Tests for the coarse decoder."""

    def test_shape(self):
        """O4 is one channel at the f4 resolution."""
        grd = GlobalRoughDecoder(128, 32).eval()
        out = grd(torch.randn(2, 128, 12, 12), torch.randn(2, 32, 12, 12))
        assert out.shape == (2, 1, 12, 12)

    def test_gelu_gate_fixed_point(self):
        """The GELU gate maps zero to zero."""
        assert torch.equal(gelu_gate(torch.zeros(3)), torch.zeros(3))

    def test_saturated_head(self):
        """A head bias of +20 saturates the sigmoid."""
        grd = GlobalRoughDecoder(16, 8).eval()
        with torch.no_grad():
            grd.head.weight.zero_()
            grd.head.bias.fill_(20.0)
            out = grd(torch.randn(1, 16, 4, 4), torch.randn(1, 8, 4, 4))
        assert torch.all(torch.sigmoid(out) >= 1 - 1e-8)

    def test_resolution_mismatch(self):
        """x4 and f4 must share a resolution."""
        grd = GlobalRoughDecoder(16, 8)
        with pytest.raises(ResolutionMismatch):
            grd(torch.randn(1, 16, 4, 4), torch.randn(1, 8, 2, 2))


class TestDualReverseRefinement:
    """Tests for one reverse refinement stage."""

    def test_saturated_priors_suppress_reverse_path(self):
        """Confident priors leave nothing for the reverse-weighted feature."""
        f_c = torch.randn(2, 8, 6, 6)
        prior = torch.full((2, 1, 6, 6), 40.0)
        f_w = DualReverseRefinement.reverse_weighted(f_c, prior, prior)
        assert f_w.abs().max() <= 1e-15

    def test_spatial_branch_footprint(self):
        """F_s is a depthwise-separable 3x3 conv with norm and ReLU over a 3x3 footprint."""
        stage = DualReverseRefinement(8).eval()
        assert stage.spatial.depthwise.kernel_size == (3, 3)

        x = torch.randn(1, 8, 9, 9, requires_grad=True)
        out = stage.spatial(x)
        assert out.shape == x.shape
        assert out.min() >= 0

        pre_activation = stage.spatial.pointwise(stage.spatial.depthwise(x))
        pre_activation[0, :, 4, 4].sum().backward()
        touched = x.grad[0].abs().sum(dim=0).nonzero()
        assert touched[:, 0].min() >= 3 and touched[:, 0].max() <= 5
        assert touched[:, 1].min() >= 3 and touched[:, 1].max() <= 5

    def test_neutral_priors_pass_feature(self):
        """Zero priors give R1 + R2 = 1, so F_w equals F_c exactly."""
        f_c = torch.randn(2, 8, 6, 6)
        prior = torch.zeros(2, 1, 6, 6)
        assert torch.equal(DualReverseRefinement.reverse_weighted(f_c, prior, prior), f_c)

    def test_reverse_weight_monotone(self):
        """Raising a prior logit shrinks |F_w| everywhere."""
        f_c = torch.randn(1, 4, 5, 5)
        low = torch.randn(1, 1, 5, 5)
        high = low + torch.rand(1, 1, 5, 5) + 0.1
        weak = DualReverseRefinement.reverse_weighted(f_c, low, low).abs()
        strong = DualReverseRefinement.reverse_weighted(f_c, high, high).abs()
        assert torch.all(strong <= weak)

    @pytest.mark.parametrize("dtype,tol", [(torch.float32, 1e-5), (torch.float64, 1e-10)])
    def test_unit_modulation_frequency_identity(self, dtype, tol):
        """Unit spectral weights make the frequency branch the identity."""
        drrm = DualReverseRefinement(8).to(dtype)
        with torch.no_grad():
            drrm.modulation.weight.zero_()
            drrm.modulation.bias.fill_(1.0)
            f_c = torch.randn(2, 8, 10, 12, dtype=dtype)
            torch.testing.assert_close(drrm.frequency(f_c), f_c, atol=tol, rtol=0)

    def test_priors_added_in_logit_space(self):
        """With a silent head the output is the sum of the upsampled priors."""
        drrm = DualReverseRefinement(8).eval()
        with torch.no_grad():
            drrm.head.weight.zero_()
            drrm.head.bias.zero_()
            prior = torch.randn(1, 1, 4, 4)
            prior2 = torch.randn(1, 1, 2, 2)
            out = drrm(torch.randn(1, 8, 8, 8), prior, prior2)

        expected = F.interpolate(prior, size=(8, 8), mode="bilinear", align_corners=False) + F.interpolate(
            prior2, size=(8, 8), mode="bilinear", align_corners=False
        )
        torch.testing.assert_close(out, expected)


class TestRefinementDecoder:
    """Tests for the full decoding cascade."""

    def test_incomplete_fused_pyramid(self):
        """decode_all needs all four fused levels."""
        decoder = RefinementDecoder(16, 8)
        with pytest.raises(IncompletePyramid):
            decoder.decode_all(torch.randn(1, 16, 2, 2), [torch.randn(1, 8, 2, 2)] * 3)


class TestNetwork:
    """End-to-end shape and behavior checks on the tiny profile."""

    def test_shape_chain_at_384(self):
        """A 384x384 input yields O4..O0 at 12, 24, 48, 96 and 192."""
        model = build_model(ModelConfig()).eval()
        with torch.no_grad():
            images = torch.randn(1, 3, 384, 384)
            pyramid = model.backbone(images)
            predictions = model(images)

        assert [f.shape[-1] for f in pyramid] == [96, 48, 24, 12]
        assert predictions.resolutions == [(12, 12), (24, 24), (48, 48), (96, 96), (192, 192)]
        probs = predictions.probabilities(0, size=(384, 384))
        assert torch.isfinite(probs).all()
        assert probs.min() >= 0 and probs.max() <= 1

    def test_invalid_input_size(self):
        """Inputs not divisible by 32 are rejected."""
        model = DRRNet(ModelConfig(width=8)).eval()
        with pytest.raises(InvalidResolution):
            model(torch.randn(1, 3, 40, 40))

    def test_zero_network_predicts_half(self):
        """A fully zeroed network emits zero logits at every level."""
        model = DRRNet(ModelConfig(width=8)).eval()
        zero_parameters(model)
        with torch.no_grad():
            predictions = model(torch.randn(1, 3, 64, 64))
        for logits in predictions.logits:
            assert torch.count_nonzero(logits) == 0

    def test_deterministic_forward(self):
        """Same seed, same weights, same input: bitwise identical outputs."""
        images = torch.randn(1, 3, 64, 64)
        outputs = []
        for _ in range(2):
            torch.manual_seed(3)
            model = DRRNet(ModelConfig(width=8)).eval()
            with torch.no_grad():
                outputs.append(model(images).logits)
        for a, b in zip(*outputs):
            assert torch.equal(a, b)

    def test_every_head_receives_gradient(self):
        """Deep supervision reaches all five prediction heads."""
        model = DRRNet(ModelConfig(width=8))
        mask = (torch.rand(2, 1, 64, 64) > 0.5).float()
        total_loss(model(torch.randn(2, 3, 64, 64)), mask).backward()

        heads = [model.decoder.rough.head] + [r.head for r in model.decoder.refiners]
        for head in heads:
            assert head.bias.grad.abs().max() > 0

    def test_heads_follow_backbone_stage_channels(self):
        """Encoder heads are sized from the backbone's reported stage widths."""
        model = DRRNet(ModelConfig(width=8, backbone={"stage_channels": [4, 8, 12, 20]})).eval()
        assert model.backbone.stage_channels == [4, 8, 12, 20]
        with torch.no_grad():
            assert model(torch.randn(1, 3, 64, 64)).final.shape == (1, 1, 32, 32)

    def test_single_sample_training_step(self):
        """One 32x32 sample trains in train mode even though the deepest level is 1x1."""
        model = build_model(ModelConfig(width=8)).train()
        mask = torch.zeros(1, 1, 32, 32)
        mask[..., 8:24, 8:24] = 1.0

        loss = total_loss(model(torch.randn(1, 3, 32, 32)), mask)
        loss.backward()

        assert torch.isfinite(loss)
        assert model.decoder.rough.head.bias.grad is not None

    @pytest.mark.parametrize("mode", ["ocm_fusion", "mdm_fusion", "mmf_fusion"])
    def test_addition_variants(self, mode):
        """Each addition ablation builds and runs."""
        model = DRRNet(ModelConfig(width=8, **{mode: "add"})).eval()
        with torch.no_grad():
            assert model(torch.randn(1, 3, 32, 32)).final.shape == (1, 1, 16, 16)
