import math
from dataclasses import dataclass, field, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .wavelet import dwt_pyramid


@dataclass
class LossWeights:
    lambda1: float = 1.0  # charbonnier
    lambda2: float = 1.1  # wavelet-SSIM
    lambda3: float = 0.1  # perceptual

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class SsimConfig:
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2
    window: str = "global"  # or "gaussian"
    window_size: int = 11
    sigma: float = 1.5

    def __post_init__(self):
        if self.c1 <= 0 or self.c2 <= 0:
            raise ConfigError(f"c1 and c2 must be > 0, got {self.c1}, {self.c2}")
        if self.window not in ("global", "gaussian"):
            raise ConfigError(f"window must be 'global' or 'gaussian', got {self.window!r}")
        if self.window == "gaussian" and (self.window_size < 1 or self.window_size % 2 == 0):
            raise ConfigError(f"window_size must be odd and positive, got {self.window_size}")

    @classmethod
    def gaussian(cls, size=11, sigma=1.5):
        return cls(window="gaussian", window_size=size, sigma=sigma)


@dataclass
class WSsimConfig:
    levels: int = 2
    gamma: list = field(default_factory=lambda: [1.0, 0.5, 0.25])
    # level-i orthonormal Haar coefficients span a range of 2**i, so c1/c2 are
    # rescaled by 4**i; with unscaled constants the near-zero means of the
    # high-pass bands make the luminance term ill-conditioned
    range_scaled: bool = True

    def __post_init__(self):
        self.gamma = [float(g) for g in self.gamma]
        if self.levels < 0:
            raise ConfigError(f"levels must be >= 0, got {self.levels}")
        if len(self.gamma) != self.levels + 1:
            raise ConfigError(
                f"gamma needs levels+1 = {self.levels + 1} entries, got {len(self.gamma)}"
            )
        if any(g < 0 for g in self.gamma) or not any(g > 0 for g in self.gamma):
            raise ConfigError(f"gamma entries must be >= 0 with at least one > 0: {self.gamma}")

    def identity_value(self):
        """W-SSIM loss of an image against itself."""
        return -(self.gamma[0] + 4 * sum(self.gamma[1:]))


@dataclass
class LossBreakdown:
    l_cha: float
    l_wssim: float
    l_per: float
    total: float


def _check_pair(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")


def charbonnier_loss(pred, target, epsilon=1e-6):
    _check_pair(pred, target)
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon}")
    diff = pred - target
    return torch.sqrt(diff * diff + epsilon * epsilon).mean()


def gaussian_window(size, sigma, dtype=torch.float32):
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim_index(pred, target, cfg=None):
    """Mean SSIM over every image-channel plane (positive convention)."""
    cfg = cfg or SsimConfig()
    _check_pair(pred, target)
    if pred.dim() < 2:
        raise ShapeError(f"expected (..., H, W), got {tuple(pred.shape)}")
    h, w = pred.shape[-2:]
    x = pred.reshape(-1, 1, h, w)
    y = target.reshape(-1, 1, h, w)

    if cfg.window == "global":
        mu_x = x.mean(dim=(-2, -1))
        mu_y = y.mean(dim=(-2, -1))
        dx = x - mu_x[..., None, None]
        dy = y - mu_y[..., None, None]
        var_x = (dx * dx).mean(dim=(-2, -1))
        var_y = (dy * dy).mean(dim=(-2, -1))
        cov = (dx * dy).mean(dim=(-2, -1))
    else:
        k = cfg.window_size
        if h < k or w < k:
            raise ShapeError(f"{k}x{k} SSIM window does not fit a {h}x{w} image")
        win = gaussian_window(k, cfg.sigma, pred.dtype).to(pred.device)[None, None]
        mu_x = F.conv2d(x, win)
        mu_y = F.conv2d(y, win)
        var_x = F.conv2d(x * x, win) - mu_x * mu_x
        var_y = F.conv2d(y * y, win) - mu_y * mu_y
        cov = F.conv2d(x * y, win) - mu_x * mu_y

    c1, c2 = cfg.c1, cfg.c2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return (num / den).mean()


def ssim_loss(pred, target, cfg=None):
    return -ssim_index(pred, target, cfg)


def wssim_loss(pred, target, wcfg=None, scfg=None):
    wcfg = wcfg or WSsimConfig()
    _check_pair(pred, target)
    if len(wcfg.gamma) != wcfg.levels + 1:
        raise ConfigError("gamma length must equal levels + 1")
    p_pyr = dwt_pyramid(pred, wcfg.levels)
    t_pyr = dwt_pyramid(target, wcfg.levels)
    scfg = scfg or SsimConfig()
    loss = wcfg.gamma[0] * ssim_loss(pred, target, scfg)
    for i in range(1, wcfg.levels + 1):
        if wcfg.gamma[i] == 0:
            continue
        level_cfg = level_ssim_config(scfg, i) if wcfg.range_scaled else scfg
        for p_band, t_band in zip(p_pyr.level(i).bands(), t_pyr.level(i).bands()):
            loss = loss + wcfg.gamma[i] * ssim_loss(p_band, t_band, level_cfg)
    return loss


def level_ssim_config(scfg, level):
    gain = 4.0 ** level
    return replace(scfg, c1=scfg.c1 * gain, c2=scfg.c2 * gain)


class FeatureExtractor(nn.Module):
    """Frozen network mapping (B, C, H, W) images to a list of feature maps."""

    in_channels = 3

    def freeze(self):
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def train(self, mode=True):
        # stays in eval mode whatever the caller asks
        return super().train(False)


class IdentityExtractor(FeatureExtractor):
    def __init__(self, in_channels=3):
        super().__init__()
        self.in_channels = in_channels

    def forward(self, x):
        return [x]


class RandomConvExtractor(FeatureExtractor):
    """Seeded random convolutional pyramid; a download-free stand-in for VGG features."""

    def __init__(self, seed=0, in_channels=3, widths=(16, 32, 64)):
        super().__init__()
        self.in_channels = in_channels
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        stages = []
        c_in = in_channels
        for c_out in widths:
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            bound = math.sqrt(6.0 / (c_in * 9))
            with torch.no_grad():
                conv.weight.copy_(torch.empty_like(conv.weight).uniform_(-bound, bound, generator=gen))
                conv.bias.zero_()
            stages.append(nn.Sequential(conv, nn.ReLU()))
            c_in = c_out
        self.stages = nn.ModuleList(stages)
        self.freeze()

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


# last ReLU of each of the five VGG19 conv stages
VGG19_TAPS = (3, 8, 17, 26, 35)


class VGG19Extractor(FeatureExtractor):
    def __init__(self, state_dict=None, taps=VGG19_TAPS):
        super().__init__()
        from torchvision.models import vgg19

        features = vgg19(weights=None).features
        if state_dict is not None:
            # accept either a full vgg19 state dict or one keyed for `.features`
            sd = {k[len("features."):]: v for k, v in state_dict.items() if k.startswith("features.")}
            features.load_state_dict(sd or state_dict)
        self.features = features[: max(taps) + 1]
        self.taps = tuple(taps)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.freeze()

    def forward(self, x):
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.taps:
                feats.append(x)
        return feats


def default_extractor(seed=0):
    return RandomConvExtractor(seed=seed)


def perceptual_loss(pred, target, extractor):
    _check_pair(pred, target)
    squeeze = pred.dim() == 3
    if squeeze:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    if pred.shape[1] != extractor.in_channels:
        raise ConfigError(
            f"extractor expects {extractor.in_channels} channels, images have {pred.shape[1]}"
        )
    for p in extractor.parameters():
        if p.requires_grad:
            raise ConfigError("perceptual extractor is not frozen")
        if p.dtype != pred.dtype:
            raise ConfigError(f"extractor dtype {p.dtype} does not match images ({pred.dtype})")
    with torch.no_grad():
        t_feats = extractor(target)
    p_feats = extractor(pred)
    loss = pred.new_zeros(())
    for pf, tf in zip(p_feats, t_feats):
        loss = loss + (pf - tf).abs().mean()
    return loss


def total_loss(pred, target, weights=None, wcfg=None, scfg=None, extractor=None, epsilon=1e-6):
    weights = weights or LossWeights()
    l_cha = charbonnier_loss(pred, target, epsilon)
    l_wssim = wssim_loss(pred, target, wcfg, scfg)
    if extractor is None:
        if weights.lambda3 != 0:
            raise ConfigError("a perceptual extractor is required when lambda3 != 0")
        l_per = pred.new_zeros(())
    else:
        l_per = perceptual_loss(pred, target, extractor)
    total = weights.lambda1 * l_cha + weights.lambda2 * l_wssim + weights.lambda3 * l_per
    breakdown = LossBreakdown(
        l_cha=l_cha.item(), l_wssim=l_wssim.item(), l_per=l_per.item(), total=total.item()
    )
    return total, breakdown
