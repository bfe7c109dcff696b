"""Two-stream U-shaped segmentation network with T1-driven spatial attention."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class SegNetConfig:
    depth: int = 4
    base_channels: int = 32
    use_attention: bool = True


@dataclass
class Prediction:
    logits: torch.Tensor
    probs: torch.Tensor


def conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class SpatialAttention(nn.Module):
    """Channel max+mean pooling -> 7x7 conv -> sigmoid."""

    def __init__(self, kernel_size: int = 7, zero_init: bool = False):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)
        if zero_init:
            nn.init.zeros_(self.conv.weight)
            nn.init.zeros_(self.conv.bias)

    def forward(self, x):
        pooled = torch.cat([x.amax(dim=1, keepdim=True), x.mean(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


def attention_map(t1_stem_features, block: SpatialAttention):
    return block(t1_stem_features)


class Up(nn.Module):
    def __init__(self, cin, cskip, cout):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cin // 2, 2, stride=2, bias=False)
        self.conv = conv_block(cin // 2 + cskip, cout)

    def forward(self, x, skip):
        return self.conv(torch.cat([skip, self.up(x)], dim=1))


class SegNet(nn.Module):
    """U-shaped net over two feature stacks.

    Each stream gets a stem with half the base width; the FA stem is gated by a
    spatial attention map computed from the T1 stem, the two are concatenated
    channel-wise and fed to a standard encoder/decoder with skip connections.
    """

    def __init__(self, in_t1: int, in_fa: int, config: Optional[SegNetConfig] = None):
        super().__init__()
        self.config = config = config or SegNetConfig()
        if config.depth < 1 or config.base_channels < 2:
            raise ValueError("depth must be >= 1 and base_channels >= 2")
        half = config.base_channels // 2
        self.stem_t1 = conv_block(in_t1, half)
        self.stem_fa = conv_block(in_fa, half)
        self.attention = SpatialAttention()
        self.gate_override: Optional[float] = None

        widths = [2 * half * 2 ** i for i in range(config.depth + 1)]
        self.down = nn.ModuleList(conv_block(widths[i], widths[i + 1]) for i in range(config.depth))
        self.up = nn.ModuleList(Up(widths[i + 1], widths[i], widths[i]) for i in reversed(range(config.depth)))
        self.head = nn.Conv2d(widths[0], 1, 1)
        nn.init.zeros_(self.head.bias)

    def gate(self, t1_features):
        if self.gate_override is not None:
            return torch.full_like(t1_features[:, :1], float(self.gate_override))
        if not self.config.use_attention:
            return torch.ones_like(t1_features[:, :1])
        return attention_map(t1_features, self.attention)

    def forward(self, f_t1, f_fa) -> Prediction:
        if f_t1.shape[-2:] != f_fa.shape[-2:]:
            raise ValueError(f"stream sizes differ: {tuple(f_t1.shape)} vs {tuple(f_fa.shape)}")
        h, w = f_t1.shape[-2:]
        step = 2 ** self.config.depth
        if h % step or w % step:
            raise ValueError(f"spatial size {h}x{w} is not divisible by 2**depth = {step}")
        s1 = self.stem_t1(f_t1)
        s2 = self.stem_fa(f_fa) * self.gate(s1)
        x = torch.cat([s1, s2], dim=1)
        skips = []
        for block in self.down:
            skips.append(x)
            x = block(F.max_pool2d(x, 2))
        for block in self.up:
            x = block(x, skips.pop())
        logits = self.head(x)
        return Prediction(logits=logits, probs=torch.sigmoid(logits))


def segnet_forward(f_t1, f_fa, net: SegNet) -> Prediction:
    return net(f_t1, f_fa)
