import pytest
import torch

from icssn.config import ConfigError, EncoderConfig
from icssn.encoder import ASPP, Encoder, ResNetBackbone, SEBlock

from conftest import tiny_encoder_config


@pytest.mark.parametrize("depth", [18, 50])
@pytest.mark.parametrize("size", [64, 128, 96])
def test_output_stride_eight(depth, size):
    bb = ResNetBackbone(depth, base_width=8).eval()
    with torch.no_grad():
        f2, f4 = bb(torch.randn(1, 3, size, size))
    assert f2.shape[-2:] == f4.shape[-2:] == (size // 8, size // 8)
    assert f2.shape[1] == bb.channels2 and f4.shape[1] == bb.channels4


def test_backbone_channel_bookkeeping():
    bb = ResNetBackbone(101)
    assert (bb.channels2, bb.channels4) == (512, 2048)


def test_indivisible_input():
    with pytest.raises(ValueError):
        ResNetBackbone(18, 8)(torch.randn(1, 3, 60, 60))


def test_backbone_deterministic():
    bb = ResNetBackbone(18, 8).eval()
    x = torch.randn(1, 3, 64, 64)
    with torch.no_grad():
        a, b = bb(x), bb(x)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_aspp_channels_default_dilations():
    aspp = ASPP(2560, 256, (1, 6, 12, 18)).eval()
    with torch.no_grad():
        out = aspp(torch.randn(1, 2560, 16, 16))
    assert out.shape == (1, 256, 16, 16)


def test_aspp_zero_in_zero_out():
    aspp = ASPP(32, 16, (1, 2, 3))
    with torch.no_grad():
        for mode in (True, False):
            aspp.train(mode)
            assert torch.count_nonzero(aspp(torch.zeros(2, 32, 8, 8))) == 0


@pytest.mark.parametrize("h,w", [(3, 3), (8, 5), (1, 1), (20, 12)])
def test_aspp_preserves_size(h, w):
    aspp = ASPP(8, 4, (1, 6, 12, 18)).eval()
    with torch.no_grad():
        assert aspp(torch.randn(1, 8, h, w)).shape == (1, 4, h, w)


def test_aspp_large_rate_fallback_equals_padded_conv(caplog):
    aspp = ASPP(8, 4, (1, 12)).eval()
    x = torch.randn(2, 8, 6, 6)
    conv = aspp.branches[1][0]
    with torch.no_grad():
        direct = conv(x)
        fallback = torch.nn.functional.conv2d(x, conv.weight[:, :, 1:2, 1:2])
    assert torch.allclose(direct, fallback, atol=1e-6)
    with caplog.at_level("INFO"), torch.no_grad():
        aspp(x)
    assert "centre tap" in caplog.text


def test_se_gates_in_unit_interval():
    se = SEBlock(32, 4)
    x = torch.randn(3, 32, 5, 5)
    with torch.no_grad():
        g = se.gates(x)
        out = se(x)
    assert torch.all((g > 0) & (g < 1))
    assert torch.allclose(out, x * g[:, :, None, None])
    nz = x.flatten(2).norm(dim=2) > 0
    assert torch.all(out.flatten(2).norm(dim=2)[nz] < x.flatten(2).norm(dim=2)[nz])


def test_se_zero_init_halves():
    se = SEBlock(16, 4)
    for p in se.parameters():
        torch.nn.init.zeros_(p)
    x = torch.randn(2, 16, 3, 3)
    with torch.no_grad():
        assert torch.all(se.gates(x) == 0.5)
        assert torch.equal(se(x), x / 2)


def test_encoder_shape_and_finiteness():
    enc = Encoder(tiny_encoder_config()).eval()
    with torch.no_grad():
        f = enc(torch.randn(2, 3, 128, 128) * 10)
    assert f.shape == (2, 16, 16, 16)
    assert torch.isfinite(f).all()


def test_two_instances_same_params_same_output():
    a = Encoder(tiny_encoder_config()).eval()
    b = Encoder(tiny_encoder_config()).eval()
    b.load_state_dict(a.state_dict())
    x = torch.randn(1, 3, 64, 64)
    with torch.no_grad():
        assert torch.equal(a(x), b(x))


def test_config_validation():
    for bad in (dict(backbone_depth=34), dict(output_channels=100, se_reduction=16),
                dict(aspp_dilations=(1, 6, 6)), dict(aspp_dilations=(0, 6))):
        with pytest.raises(ConfigError):
            EncoderConfig(**bad).validate()


def test_pretrained_falls_back_without_weights(caplog):
    cfg = tiny_encoder_config(pretrained=True)
    enc = Encoder(cfg)
    assert enc.backbone.conv1.weight.shape[0] == 8
    assert "base_width=64" in caplog.text
