import numpy as np
import pytest
import torch
import torch.nn.functional as F

import oracles
from s3net.checkpoint import load_model, save_model
from s3net.errors import ConfigError, DimensionError, ShapeError
from s3net.losses import LossWeights, RandomConvExtractor, total_loss
from s3net.model import (
    STEM_KEY,
    AttentionModule,
    ChannelAttention,
    EnhancedModule,
    ModelConfig,
    MultiScaleBlock,
    SpatialAttention,
    build_model,
    full_config,
    overlay_pretrained,
)

TINY = dict(
    stem_width=8,
    stage_widths=(8, 8, 8, 8),
    scale_groups=2,
    decoder_widths=(8, 8, 8),
    enhanced_pool_factors=(2, 4),
    enhanced_branch_width=2,
    attention_reduction=2,
)


@pytest.fixture(scope="module")
def desk():
    return build_model(ModelConfig(), seed=0).eval()


def test_build_is_deterministic():
    a = build_model(ModelConfig(), seed=3).state_dict()
    b = build_model(ModelConfig(), seed=3).state_dict()
    c = build_model(ModelConfig(), seed=4).state_dict()
    assert a.keys() == b.keys()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a)


def test_build_does_not_disturb_global_rng():
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    build_model(ModelConfig(), seed=9)
    assert torch.equal(torch.rand(3), expected)


def test_key_set_determined_by_config():
    a = build_model(ModelConfig(), 0).state_dict()
    b = build_model(ModelConfig(), 1).state_dict()
    assert {k: v.shape for k, v in a.items()} == {k: v.shape for k, v in b.items()}


def test_stem_takes_eight_channels(desk):
    assert desk.state_dict()[STEM_KEY].shape[1] == 8


def test_overlay_rgb_stem():
    model = build_model(ModelConfig(), seed=0)
    w = model.state_dict()[STEM_KEY]
    rgb = torch.randn(w.shape[0], 3, *w.shape[2:])
    loaded = overlay_pretrained(model, {STEM_KEY: rgb, "not.a.key": torch.zeros(1)})
    assert loaded == [STEM_KEY]
    stem = model.state_dict()[STEM_KEY]
    assert torch.equal(stem[:, :3], rgb)
    assert torch.count_nonzero(stem[:, 3:]) == 0


def test_overlay_matching_shapes_copied():
    src = build_model(ModelConfig(), seed=1)
    dst = build_model(ModelConfig(), seed=2)
    enc = {k: v for k, v in src.state_dict().items() if k.startswith("encoder.")}
    loaded = overlay_pretrained(dst, enc)
    assert set(loaded) == set(enc)
    for k in enc:
        assert torch.equal(dst.state_dict()[k], enc[k])


@pytest.mark.parametrize("bad", [
    dict(scale_groups=3),
    dict(stage_strides=(1, 2, 2, 2)),
    dict(decoder_upsamplers=("shuffle", "shuffle", "shuffle")),
    dict(in_channels=0),
    dict(norm="batch"),
])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        ModelConfig(**bad)


def test_full_preset_is_valid():
    cfg = full_config()
    assert cfg.stage_widths == (256, 512, 1024, 2048)
    assert cfg.blocks_per_stage == (3, 4, 23, 3)


# --- multi-scale block ---------------------------------------------------------

def test_multiscale_shape_and_single_group():
    x = torch.randn(2, 16, 8, 8)
    for s in (1, 2, 4, 8):
        blk = MultiScaleBlock(16, s)
        assert blk(x).shape == x.shape
    assert len(MultiScaleBlock(16, 1).convs) == 1


def test_multiscale_identity_when_fuse_zeroed():
    blk = MultiScaleBlock(16, 4)
    torch.nn.init.zeros_(blk.fuse.weight)
    torch.nn.init.zeros_(blk.fuse.bias)
    x = torch.randn(2, 16, 8, 8)
    assert torch.equal(blk(x), x)


def test_multiscale_hierarchy():
    blk = MultiScaleBlock(8, 4, norm="none")
    torch.nn.init.eye_(blk.fuse.weight.view(8, 8))
    torch.nn.init.zeros_(blk.fuse.bias)
    x = torch.randn(1, 8, 6, 6)
    g = torch.split(x, 2, dim=1)
    y1 = g[0]
    y2 = F.relu(blk.convs[0](g[1] + y1))
    y3 = F.relu(blk.convs[1](g[2] + y2))
    y4 = F.relu(blk.convs[2](g[3] + y3))
    expected = x + torch.cat([y1, y2, y3, y4], dim=1)
    assert torch.allclose(blk(x), expected, atol=1e-6)


def test_multiscale_divisibility():
    with pytest.raises(ConfigError):
        MultiScaleBlock(10, 4)


# --- encoder -------------------------------------------------------------------

def test_encoder_strides(desk):
    f = desk.encode(torch.rand(1, 8, 64, 64))
    assert f.f4.shape[-2:] == (16, 16)
    assert f.f8.shape[-2:] == (8, 8)
    assert f.f16.shape[-2:] == (4, 4)


@pytest.mark.parametrize("hw", [(32, 32), (64, 96), (128, 64)])
def test_encoder_stride_contract(desk, hw):
    f = desk.encode(torch.rand(1, 8, *hw))
    for feat, s in zip(f, (4, 8, 16)):
        assert feat.shape[-2:] == (hw[0] // s, hw[1] // s)


def test_encoder_stride_at_1024():
    # meta tensors: shape inference without allocating the activations
    model = build_model(ModelConfig(), 0).to("meta")
    f = model.encode(torch.empty(1, 8, 1024, 1024, device="meta"))
    assert f.f16.shape[-2:] == (64, 64)


def test_encoder_rejects_indivisible(desk):
    with pytest.raises(DimensionError):
        desk.encode(torch.rand(1, 8, 40, 64))


# --- attention -----------------------------------------------------------------

def test_channel_attention_open_gate():
    ca = ChannelAttention(8, 2)
    torch.nn.init.zeros_(ca.fc2.weight)
    torch.nn.init.constant_(ca.fc2.bias, 40.0)
    x = torch.randn(2, 8, 5, 5)
    assert torch.allclose(ca(x), x, atol=1e-6)


def test_channel_attention_preserves_zero_channel():
    ca = ChannelAttention(8, 2)
    x = torch.randn(1, 8, 5, 5)
    x[:, 3] = 0
    assert torch.count_nonzero(ca(x)[:, 3]) == 0


def test_channel_attention_loop_oracle():
    torch.manual_seed(0)
    ca = ChannelAttention(6, 2).double()
    x = torch.randn(2, 6, 4, 5, dtype=torch.float64)
    w1 = ca.fc1.weight[:, :, 0, 0].detach().numpy()
    b1 = ca.fc1.bias.detach().numpy()
    w2 = ca.fc2.weight[:, :, 0, 0].detach().numpy()
    b2 = ca.fc2.bias.detach().numpy()
    xn = x.numpy()
    out = np.zeros_like(xn)
    for n in range(2):
        pooled = [xn[n, c].mean() for c in range(6)]
        hidden = [max(0.0, sum(w1[j, c] * pooled[c] for c in range(6)) + b1[j]) for j in range(3)]
        for c in range(6):
            z = sum(w2[c, j] * hidden[j] for j in range(3)) + b2[c]
            gate = 1.0 / (1.0 + np.exp(-z))
            assert 0.0 < gate < 1.0
            for i in range(4):
                for k in range(5):
                    out[n, c, i, k] = xn[n, c, i, k] * gate
    np.testing.assert_allclose(ca(x).detach().numpy(), out, atol=1e-12)


def test_spatial_attention_half_gate():
    sa = SpatialAttention(4)
    torch.nn.init.zeros_(sa.conv.weight)
    torch.nn.init.zeros_(sa.conv.bias)
    x = torch.randn(2, 4, 6, 6)
    assert torch.allclose(sa(x), 0.5 * x)


def test_spatial_attention_loop_oracle():
    torch.manual_seed(1)
    sa = SpatialAttention(3).double()
    x = torch.randn(1, 3, 5, 5, dtype=torch.float64)
    logits = sa.conv(x).detach().numpy()[0, 0]
    xn = x.numpy()
    out = np.zeros_like(xn)
    for c in range(3):
        for i in range(5):
            for j in range(5):
                out[0, c, i, j] = xn[0, c, i, j] / (1.0 + np.exp(-logits[i, j]))
    np.testing.assert_allclose(sa(x).detach().numpy(), out, atol=1e-12)


def test_attention_module_composition():
    torch.manual_seed(2)
    am = AttentionModule(8, 2)
    x = torch.randn(2, 8, 6, 6)
    r = am.residual(x)
    expected = am.channel(am.spatial(r))
    assert torch.equal(am(x), expected)
    assert am(x).shape == x.shape


def test_attention_gates_bounded():
    am = AttentionModule(64, 4).double()
    x = torch.randn(2, 64, 4, 4, dtype=torch.float64) * 3
    for gate in (am.channel.gate(x), am.spatial.gate(x)):
        assert torch.all((gate > 0) & (gate < 1))


# --- enhanced module -----------------------------------------------------------

def test_enhanced_constant_input():
    em = EnhancedModule(6, 5, (2, 4, 8), branch_width=3)
    x = torch.full((1, 6, 16, 16), 0.37)
    y = em(x)
    assert y.shape == (1, 5, 16, 16)
    assert torch.allclose(y, y[..., :1, :1].expand_as(y), atol=1e-6)


def test_enhanced_channel_accounting():
    factors, bw, c = (2, 4, 8, 16), 4, 16
    em = EnhancedModule(c, 12, factors, bw)
    assert len(em.branches) == len(factors)
    assert em.fuse.in_channels == c + bw * len(factors)
    assert em.fuse.out_channels == 12
    assert all(b.out_channels == bw for b in em.branches)


def test_enhanced_divisibility():
    with pytest.raises(DimensionError):
        EnhancedModule(4, 4, (2, 4, 8))(torch.rand(1, 4, 12, 12))


# --- pixel shuffle / decoder / forward -----------------------------------------

def test_pixel_shuffle_index_formula():
    r = 2
    x = torch.arange(16, dtype=torch.float32).reshape(1, 4, 2, 2)
    y = F.pixel_shuffle(x, r)
    assert y.shape == (1, 1, 4, 4)
    for c in range(1):
        for h in range(2):
            for w in range(2):
                for a in range(r):
                    for b in range(r):
                        assert y[0, c, h * r + a, w * r + b] == x[0, c * r * r + a * r + b, h, w]
    assert sorted(y.flatten().tolist()) == sorted(x.flatten().tolist())


def test_decoder_uses_both_upsamplers(desk):
    kinds = [desk.decoder.up16.kind, desk.decoder.up8.kind, desk.decoder.up4.kind]
    assert "shuffle" in kinds and "deconv" in kinds


def test_forward_shape_and_range(desk):
    x = torch.rand(8, 64, 64)
    with torch.no_grad():
        y = desk(x)
    assert y.shape == (3, 64, 64)
    assert y.min() >= 0 and y.max() <= 1


@pytest.mark.parametrize("hw", [(32, 32), (64, 96)])
def test_forward_shape_closure(desk, hw):
    with torch.no_grad():
        assert desk(torch.rand(2, 8, *hw)).shape == (2, 3, *hw)


def test_forward_errors(desk):
    with pytest.raises(ShapeError):
        desk(torch.rand(1, 6, 64, 64))
    with pytest.raises(DimensionError):
        desk(torch.rand(1, 8, 48, 48))


def test_batch_independence(desk):
    x = torch.rand(3, 8, 64, 64, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        batched = desk(x)
        for i in range(3):
            assert (desk(x[i]) - batched[i]).abs().max() < 1e-5


def test_forward_deterministic():
    x = torch.rand(1, 8, 64, 64, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        a = build_model(ModelConfig(), 5)(x)
        b = build_model(ModelConfig(), 5)(x)
    assert torch.equal(a, b)


def test_input_gradient_finite(desk):
    x = torch.rand(1, 8, 64, 64, requires_grad=True)
    desk(x).mean().backward()
    assert torch.isfinite(x.grad).all()
    assert x.grad.abs().sum() > 0


def test_parameter_gradient_check():
    model = build_model(ModelConfig(**TINY), seed=0).double()
    ext = RandomConvExtractor(0).double()
    g = torch.Generator().manual_seed(0)
    x = torch.rand(1, 8, 32, 32, dtype=torch.float64, generator=g)
    y = torch.rand(1, 3, 32, 32, dtype=torch.float64, generator=g)
    names = ["encoder.stem.0.weight", "encoder.stages.2.3.convs.0.0.weight",
             "decoder.att16.channel.fc1.weight", "decoder.merge4.weight", "decoder.head.weight"]
    params = dict(model.named_parameters())
    idx_rng = np.random.default_rng(0)

    def loss():
        return total_loss(model(x), y, LossWeights(), extractor=ext)[0]

    model.zero_grad()
    loss().backward()
    analytic, numeric = [], []
    with torch.no_grad():
        for name in names:
            p = params[name]
            flat = p.view(-1)
            for i in idx_rng.choice(flat.numel(), size=4, replace=False):
                analytic.append(p.grad.view(-1)[i].item())
                old = flat[i].item()
                flat[i] = old + 1e-6
                lp = loss().item()
                flat[i] = old - 1e-6
                lm = loss().item()
                flat[i] = old
                numeric.append((lp - lm) / 2e-6)
    assert oracles.rel_err(analytic, numeric) < 1e-3


def test_checkpoint_roundtrip(tmp_path, desk):
    path = tmp_path / "m.pt"
    save_model(path, desk)
    back = load_model(path)
    assert back.cfg == desk.cfg
    for k, v in desk.state_dict().items():
        assert torch.equal(back.state_dict()[k], v)


def test_checkpoint_shape_validation(tmp_path, desk):
    from s3net.checkpoint import save_archive

    sd = dict(desk.state_dict())
    sd[STEM_KEY] = torch.zeros(1)
    save_archive(tmp_path / "bad.pt", "model", sd, desk.cfg)
    with pytest.raises(ShapeError, match=STEM_KEY):
        load_model(tmp_path / "bad.pt")
