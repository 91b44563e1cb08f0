"""Single-stream relighting network.

Encoder: stride-4 stem followed by four stages of Res2Net-style multi-scale
blocks (output stride 16). Decoder: attention modules at every resolution,
pixel-shuffle / transposed-convolution upsampling, skip connections from the
stride-8 and stride-4 encoder stages, and a multi-rate pooling ("enhanced")
module ahead of the output head.
"""
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, ShapeError

STEM_STRIDE = 4


@dataclass
class ModelConfig:
    in_channels: int = 8
    out_channels: int = 3
    stem_width: int = 16
    stage_widths: tuple = (16, 32, 64, 64)
    stage_strides: tuple = (1, 2, 2, 1)
    blocks_per_stage: tuple = (1, 1, 1, 1)
    scale_groups: int = 4
    decoder_widths: tuple = (32, 16, 16)
    decoder_upsamplers: tuple = ("shuffle", "deconv", "shuffle")
    enhanced_pool_factors: tuple = (2, 4, 8, 16)
    enhanced_branch_width: int = 4
    attention_reduction: int = 4
    norm: str = "group"  # "group" or "none"; batch-independent either way

    def __post_init__(self):
        for name in ("stage_widths", "stage_strides", "blocks_per_stage", "decoder_widths",
                     "decoder_upsamplers", "enhanced_pool_factors"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("in_channels and out_channels must be >= 1")
        if len(self.stage_widths) != 4 or len(self.stage_strides) != 4 or len(self.blocks_per_stage) != 4:
            raise ConfigError("stage_widths, stage_strides and blocks_per_stage need 4 entries each")
        if self.stage_strides[0] != 1 or self.stage_strides[1] != 2:
            raise ConfigError("stage 1 must keep stride 4 and stage 2 must reach stride 8")
        if STEM_STRIDE * math.prod(self.stage_strides) != 16:
            raise ConfigError(
                f"stem x stage strides must compose to 16, got {STEM_STRIDE * math.prod(self.stage_strides)}"
            )
        if self.scale_groups < 1:
            raise ConfigError("scale_groups must be >= 1")
        for w in self.stage_widths:
            if w % self.scale_groups:
                raise ConfigError(f"scale_groups={self.scale_groups} does not divide stage width {w}")
        if len(self.decoder_widths) != 3 or len(self.decoder_upsamplers) != 3:
            raise ConfigError("decoder_widths and decoder_upsamplers need 3 entries each")
        ups = set(self.decoder_upsamplers)
        if not ups <= {"shuffle", "deconv"}:
            raise ConfigError(f"unknown upsampler in {self.decoder_upsamplers}")
        if ups != {"shuffle", "deconv"}:
            raise ConfigError("decoder must use both pixel shuffle and transposed convolution")
        if not self.enhanced_pool_factors or any(p < 1 for p in self.enhanced_pool_factors):
            raise ConfigError("enhanced_pool_factors must be a nonempty list of positive ints")
        if self.attention_reduction < 1:
            raise ConfigError("attention_reduction must be >= 1")
        if self.norm not in ("group", "none"):
            raise ConfigError(f"norm must be 'group' or 'none', got {self.norm!r}")

    @property
    def divisor(self):
        """Input H and W must be multiples of this."""
        # enhanced module runs at stride 2
        return math.lcm(16, 2 * math.lcm(*self.enhanced_pool_factors))

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def desk_config(**overrides):
    return ModelConfig(**overrides)


def full_config(**overrides):
    """Res2Net101-like widths and depths (23 blocks in the third stage)."""
    base = dict(
        stem_width=64,
        stage_widths=(256, 512, 1024, 2048),
        blocks_per_stage=(3, 4, 23, 3),
        scale_groups=4,
        decoder_widths=(512, 256, 128),
        enhanced_branch_width=16,
        attention_reduction=16,
    )
    base.update(overrides)
    return ModelConfig(**base)


PRESETS = {"desk": desk_config, "full": full_config}


def conv3x3(c_in, c_out, stride=1):
    return nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)


def norm_layer(channels, kind="group", max_groups=8):
    if kind == "none":
        return nn.Identity()
    groups = math.gcd(channels, max_groups)
    return nn.GroupNorm(groups, channels)


def init_weights(module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class MultiScaleBlock(nn.Module):
    """Res2Net-style hierarchical residual block; output shape equals input shape."""

    def __init__(self, channels, scale_groups, norm="group"):
        super().__init__()
        if channels % scale_groups:
            raise ConfigError(f"scale_groups={scale_groups} does not divide {channels} channels")
        self.scale = scale_groups
        self.width = channels // scale_groups
        n_convs = 1 if scale_groups == 1 else scale_groups - 1
        self.convs = nn.ModuleList(
            nn.Sequential(conv3x3(self.width, self.width), norm_layer(self.width, norm))
            for _ in range(n_convs)
        )
        self.fuse = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        if x.shape[1] != self.width * self.scale:
            raise ShapeError(f"expected {self.width * self.scale} channels, got {x.shape[1]}")
        groups = torch.split(x, self.width, dim=1)
        if self.scale == 1:
            outs = [F.relu(self.convs[0](groups[0]))]
        else:
            outs = [groups[0]]
            for k, conv in enumerate(self.convs, start=1):
                outs.append(F.relu(conv(groups[k] + outs[-1])))
        return x + self.fuse(torch.cat(outs, dim=1))


class EncoderFeatures(NamedTuple):
    f4: torch.Tensor
    f8: torch.Tensor
    f16: torch.Tensor


class Encoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.stem = nn.Sequential(
            conv3x3(cfg.in_channels, cfg.stem_width, stride=2),
            norm_layer(cfg.stem_width, cfg.norm),
            nn.ReLU(),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        stages = []
        c_in = cfg.stem_width
        for width, stride, n_blocks in zip(cfg.stage_widths, cfg.stage_strides, cfg.blocks_per_stage):
            layers = [conv3x3(c_in, width, stride=stride), norm_layer(width, cfg.norm), nn.ReLU()]
            layers += [MultiScaleBlock(width, cfg.scale_groups, cfg.norm) for _ in range(n_blocks)]
            stages.append(nn.Sequential(*layers))
            c_in = width
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 16 or w % 16:
            raise DimensionError(f"encoder input H and W must be divisible by 16, got {h}x{w}")
        x = self.stem(x)
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        # stage 1 at stride 4, stage 2 at stride 8, stages 3-4 at stride 16
        return EncoderFeatures(f4=outs[0], f8=outs[1], f16=outs[3])


class ChannelAttention(nn.Module):
    def __init__(self, channels, reduction=4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def gate(self, x):
        s = F.adaptive_avg_pool2d(x, 1)
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x):
        return x * self.gate(x)


class SpatialAttention(nn.Module):
    def __init__(self, channels, kernel_size=3):
        super().__init__()
        self.conv = nn.Conv2d(channels, 1, kernel_size, padding=kernel_size // 2)

    def gate(self, x):
        return torch.sigmoid(self.conv(x))

    def forward(self, x):
        return x * self.gate(x)


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = conv3x3(channels, channels)
        self.conv2 = conv3x3(channels, channels)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class AttentionModule(nn.Module):
    """Residual layer, then spatial attention, then channel attention."""

    def __init__(self, channels, reduction=4):
        super().__init__()
        self.residual = ResidualBlock(channels)
        self.spatial = SpatialAttention(channels)
        self.channel = ChannelAttention(channels, reduction)

    def forward(self, x):
        return self.channel(self.spatial(self.residual(x)))


class EnhancedModule(nn.Module):
    """Average-pool at several rates, project, upsample back and fuse with the input."""

    def __init__(self, channels, out_channels, pool_factors=(2, 4, 8, 16), branch_width=4):
        super().__init__()
        self.pool_factors = tuple(pool_factors)
        self.branches = nn.ModuleList(nn.Conv2d(channels, branch_width, 1) for _ in self.pool_factors)
        self.fuse = nn.Conv2d(channels + branch_width * len(self.pool_factors), out_channels, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        p_max = math.lcm(*self.pool_factors)
        if h % p_max or w % p_max:
            raise DimensionError(f"enhanced module needs H and W divisible by {p_max}, got {h}x{w}")
        parts = [x]
        for p, conv in zip(self.pool_factors, self.branches):
            y = F.relu(conv(F.avg_pool2d(x, p)))
            parts.append(F.interpolate(y, scale_factor=p, mode="nearest"))
        return F.relu(self.fuse(torch.cat(parts, dim=1)))


class Upsample2x(nn.Module):
    def __init__(self, c_in, c_out, kind):
        super().__init__()
        self.kind = kind
        if kind == "shuffle":
            self.conv = conv3x3(c_in, c_out * 4)
        elif kind == "deconv":
            self.conv = nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1)
        else:
            raise ConfigError(f"unknown upsampler {kind!r}")

    def forward(self, x):
        x = self.conv(x)
        if self.kind == "shuffle":
            x = F.pixel_shuffle(x, 2)
        return F.relu(x)


class Decoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        w4, w8, _, w16 = cfg.stage_widths
        d1, d2, d3 = cfg.decoder_widths
        u1, u2, u3 = cfg.decoder_upsamplers
        r = cfg.attention_reduction
        # stride 16 -> 8, merge f8
        self.att16 = AttentionModule(w16, r)
        self.up16 = Upsample2x(w16, d1, u1)
        self.merge8 = nn.Conv2d(d1 + w8, d1, 1)
        # stride 8 -> 4, merge f4
        self.att8 = AttentionModule(d1, r)
        self.up8 = Upsample2x(d1, d2, u2)
        self.merge4 = nn.Conv2d(d2 + w4, d2, 1)
        # stride 4 -> 2
        self.att4 = AttentionModule(d2, r)
        self.up4 = Upsample2x(d2, d3, u3)
        self.enhanced = EnhancedModule(d3, d3, cfg.enhanced_pool_factors, cfg.enhanced_branch_width)
        # stride 2 -> 1
        self.head = conv3x3(d3, cfg.out_channels * 4)

    def forward(self, feats):
        x = self.up16(self.att16(feats.f16))
        x = F.relu(self.merge8(torch.cat([x, feats.f8], dim=1)))
        x = self.up8(self.att8(x))
        x = F.relu(self.merge4(torch.cat([x, feats.f4], dim=1)))
        x = self.up4(self.att4(x))
        x = self.enhanced(x)
        x = F.pixel_shuffle(self.head(x), 2)
        return torch.sigmoid(x).clamp(0.0, 1.0)


class S3Net(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.encoder = Encoder(self.cfg)
        self.decoder = Decoder(self.cfg)
        init_weights(self)

    def encode(self, x):
        return self.encoder(x)

    def decode(self, feats):
        return self.decoder(feats)

    def forward(self, x):
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        h, w = x.shape[-2:]
        d = self.cfg.divisor
        if h % d or w % d:
            raise DimensionError(f"input H and W must be divisible by {d}, got {h}x{w}")
        out = self.decode(self.encode(x))
        return out[0] if squeeze else out


def build_model(cfg=None, seed=0):
    """Deterministically initialised network; its state_dict is the parameter set."""
    cfg = cfg or ModelConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = S3Net(cfg)
    return model


STEM_KEY = "encoder.stem.0.weight"


def overlay_pretrained(model, pretrained):
    """Copy matching-shape tensors from `pretrained` into `model`.

    A stem weight with fewer input channels (e.g. RGB-only) fills the leading
    input slices and zeroes the rest. Returns the list of keys written.
    """
    own = model.state_dict()
    loaded = []
    with torch.no_grad():
        for key, value in pretrained.items():
            if key not in own:
                continue
            target = own[key]
            if target.shape == value.shape:
                target.copy_(value)
                loaded.append(key)
            elif (key == STEM_KEY and value.dim() == 4 and target.shape[0] == value.shape[0]
                  and target.shape[2:] == value.shape[2:] and value.shape[1] < target.shape[1]):
                target.zero_()
                target[:, : value.shape[1]].copy_(value)
                loaded.append(key)
    return loaded
