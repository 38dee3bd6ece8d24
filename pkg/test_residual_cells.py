import pytest
import torch

from residual_cells import (BN_MOMENTUM, DecoderCell, DecoderCombiner, DownCell,
                            EncoderCell, SqueezeExcite, UpCell, count_parameters)


class TestResidualCells:

    @pytest.mark.parametrize("cell_cls", [EncoderCell, DecoderCell])
    def test_fresh_cell_is_identity(self, cell_cls):
        cell = cell_cls(8).eval()
        x = torch.randn(2, 8, 5, 5)
        with torch.no_grad():
            torch.testing.assert_close(cell(x), x)

    def test_fresh_cell_is_identity_in_train_mode(self):
        cell = EncoderCell(4).train()
        x = torch.randn(3, 4, 6, 6)
        torch.testing.assert_close(cell(x), x)

    def test_encoder_cell_hand_count(self):
        # two BN(2) + conv3x3(2->2) pairs: 2 * (4 + 2*2*9 + 2)
        assert count_parameters(EncoderCell(2, use_se=False)) == 84
        # SE hidden width is max(2 // 16, 4) = 4: (2*4 + 4) + (4*2 + 2)
        assert count_parameters(EncoderCell(2, use_se=True)) == 84 + 22

    def test_batch_norm_momentum(self):
        bns = [m for m in DecoderCell(4).modules() if isinstance(m, torch.nn.BatchNorm2d)]
        assert bns and all(bn.momentum == BN_MOMENTUM for bn in bns)

    def test_depthwise_conv_in_decoder_cell(self):
        cell = DecoderCell(4, expansion=6, kernel_size=5)
        depthwise = [m for m in cell.modules() if isinstance(m, torch.nn.Conv2d) and m.groups > 1]
        assert len(depthwise) == 1
        assert depthwise[0].groups == 24
        assert depthwise[0].kernel_size == (5, 5)

    def test_down_and_up_shapes(self):
        x = torch.randn(2, 4, 8, 8)
        down = DownCell(4, 8)(x)
        assert down.shape == (2, 8, 4, 4)
        assert UpCell(8, 4)(down).shape == (2, 4, 8, 8)

    def test_combiner_keeps_width(self):
        out = DecoderCombiner(6, 2)(torch.randn(1, 6, 4, 4), torch.randn(1, 2, 4, 4))
        assert out.shape == (1, 6, 4, 4)


class TestSqueezeExcite:

    def test_gating_is_spatially_uniform(self):
        se = SqueezeExcite(8)
        x = torch.rand(2, 8, 5, 5) + 0.5
        ratio = se(x) / x
        torch.testing.assert_close(ratio, ratio[:, :, :1, :1].expand_as(ratio))
        assert bool(torch.all((ratio > 0) & (ratio < 1)))

    def test_zero_gate_weights_give_uniform_half(self):
        se = SqueezeExcite(8)
        for p in se.gate[-2].parameters():
            torch.nn.init.zeros_(p)
        x = torch.randn(1, 8, 3, 3)
        torch.testing.assert_close(se(x), 0.5 * x)
