"""GLANCE spatial encoder.

local residual backbone -> three dilated 3x3 convolutions, each fed by the
previous one -> channel-stacked pyramid -> two fusion paths in mirrored
order, concatenated into one vector per frame:

    top:    global-avg-pool + depthwise conv  ->  channel hourglass
    bottom: channel hourglass (1x1 convs)     ->  global-avg-pool + depthwise conv

``variant`` selects the ablation rows: "resnet" (backbone only),
"extractor" (backbone + dilated stages), "full" (+ fusion). The first two
use global pooling and a linear projection to ``fused_dim`` so every
variant feeds the temporal encoder a vector of the same size.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, NamedTuple

import torch
from torch import nn
from torch.nn import functional as F

VARIANTS = ("resnet", "extractor", "full")


@dataclass
class EncoderConfig:
    in_channels: int = 1
    backbone_channels: int = 64
    backbone_blocks: int = 3
    stage_channels: tuple = (64, 64, 64)
    dilation_rates: tuple = (1, 2, 4)
    fused_dim: int = 256
    hourglass_ratio: float = 0.25
    input_size: tuple = (64, 64)
    variant: str = "full"

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.dilation_rates = tuple(self.dilation_rates)
        self.input_size = tuple(self.input_size)
        if len(self.stage_channels) != 3 or len(self.dilation_rates) != 3:
            raise ValueError("need exactly three stages")
        if any(b <= a for a, b in zip(self.dilation_rates, self.dilation_rates[1:])):
            raise ValueError("dilation_rates must be strictly increasing")
        if self.fused_dim % 2:
            raise ValueError("fused_dim must be even")
        if not 0 < self.hourglass_ratio <= 1:
            raise ValueError("hourglass_ratio must be in (0, 1]")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    @property
    def stacked_channels(self) -> int:
        return self.backbone_channels + sum(self.stage_channels)

    def to_dict(self) -> dict:
        return asdict(self)


class FeaturePyramid(NamedTuple):
    maps: List[torch.Tensor]
    stacked: torch.Tensor


def receptive_fields(config: EncoderConfig) -> list:
    """Theoretical receptive field (input pixels) of the backbone output and each stage.

    r_out = r_in + (k - 1) * dilation * jump_in,  jump_out = jump_in * stride
    """
    r, jump = 1, 1
    layers = [(3, 2, 1)]  # stem
    for b in range(config.backbone_blocks):
        layers += [(3, 2 if b == 0 else 1, 1), (3, 1, 1)]
    for k, s, d in layers:
        r += (k - 1) * d * jump
        jump *= s
    out = [r]
    for d in config.dilation_rates:
        r += 2 * d * jump
        out.append(r)
    return out


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class Backbone(nn.Module):
    """Stride-2 stem and residual blocks (the first one also strides by 2)."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        c = config.backbone_channels
        self.stem = nn.Sequential(nn.Conv2d(config.in_channels, c, 3, 2, 1, bias=False),
                                  nn.BatchNorm2d(c), nn.ReLU())
        self.blocks = nn.Sequential(*[ResidualBlock(c, c, 2 if i == 0 else 1)
                                      for i in range(config.backbone_blocks)])

    def forward(self, x):
        return self.blocks(self.stem(x))


class PoolDepthwise(nn.Module):
    """Global average pooling followed by a depthwise (per-channel) 1x1 convolution."""

    def __init__(self, channels):
        super().__init__()
        self.depthwise = nn.Conv2d(channels, channels, 1, groups=channels)

    def forward(self, x):
        pooled = x.mean(dim=(2, 3), keepdim=True)
        return self.depthwise(pooled).flatten(1)


class CentrosymmetricFusion(nn.Module):
    def __init__(self, channels, out_dim, ratio):
        super().__init__()
        mid = max(1, int(round(channels * ratio)))
        half = out_dim // 2
        self.top_pool = PoolDepthwise(channels)
        self.top_hourglass = nn.Sequential(nn.Linear(channels, mid), nn.ReLU(), nn.Linear(mid, half))
        self.bottom_hourglass = nn.Sequential(nn.Conv2d(channels, mid, 1), nn.ReLU(), nn.Conv2d(mid, half, 1))
        self.bottom_pool = PoolDepthwise(half)

    def top(self, stacked):
        return self.top_hourglass(self.top_pool(stacked))

    def bottom(self, stacked):
        return self.bottom_pool(self.bottom_hourglass(stacked))

    def forward(self, stacked):
        return torch.cat([self.top(stacked), self.bottom(stacked)], dim=1)


class GlanceEncoder(nn.Module):
    def __init__(self, config: EncoderConfig = None):
        super().__init__()
        self.config = config = config or EncoderConfig()
        self.backbone = Backbone(config)
        if config.variant != "resnet":
            chans = (config.backbone_channels,) + config.stage_channels
            self.stages = nn.ModuleList([
                nn.Sequential(nn.Conv2d(cin, cout, 3, 1, d, dilation=d, bias=False),
                              nn.BatchNorm2d(cout), nn.ReLU())
                for cin, cout, d in zip(chans, config.stage_channels, config.dilation_rates)
            ])
        if config.variant == "full":
            self.fusion = CentrosymmetricFusion(config.stacked_channels, config.fused_dim,
                                                config.hourglass_ratio)
        else:
            width = config.backbone_channels if config.variant == "resnet" else config.stacked_channels
            self.projection = nn.Linear(width, config.fused_dim)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d) and m.groups == 1:
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def _check(self, frames):
        if frames.dim() == 3:
            frames = frames.unsqueeze(1)
        c, h, w = frames.shape[1:]
        if c != self.config.in_channels or (h, w) != self.config.input_size:
            raise ValueError(f"expected frames of {(self.config.in_channels,) + self.config.input_size}, "
                             f"got {(c, h, w)}")
        return frames

    def backbone_local(self, frames):
        """(N, C, H, W) or (N, H, W) frames -> (N, backbone_channels, H/4, W/4)."""
        return self.backbone(self._check(frames))

    def progressive_global(self, local) -> FeaturePyramid:
        maps = [local]
        for stage in self.stages:
            maps.append(stage(maps[-1]))
        return FeaturePyramid(maps, torch.cat(maps, dim=1))

    def fusion_path_top(self, stacked):
        return self.fusion.top(stacked)

    def fusion_path_bottom(self, stacked):
        return self.fusion.bottom(stacked)

    def forward(self, frames, zero_top: bool = False):
        local = self.backbone_local(frames)
        if self.config.variant == "resnet":
            return self.projection(local.mean(dim=(2, 3)))
        stacked = self.progressive_global(local).stacked
        if self.config.variant == "extractor":
            return self.projection(stacked.mean(dim=(2, 3)))
        top = self.fusion.top(stacked)
        if zero_top:
            top = torch.zeros_like(top)
        return torch.cat([top, self.fusion.bottom(stacked)], dim=1)

    encode_frame = forward
