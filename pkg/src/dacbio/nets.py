"""Segmentation generator, patch discriminator and Dice loss."""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .validation import ShapeError

ENCODER_WIDTHS = (64, 64, 128, 256, 512)
DECODER_WIDTHS = (256, 128, 64, 32, 16)
DISC_WIDTHS = (64, 128, 256, 512)


class ForwardResult(NamedTuple):
    probmap: torch.Tensor  # (n, 3, H, W): skull, UEP, LEP
    bottleneck: torch.Tensor  # (n, 512, H/32, W/32)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


def _stage(in_ch, out_ch, stride):
    return nn.Sequential(ResidualBlock(in_ch, out_ch, stride), ResidualBlock(out_ch, out_ch))


class SegNet(nn.Module):
    """ResNet-18 style encoder with a residual, bilinear-upsampling decoder.

    Skip connections join encoder and decoder at 1/16, 1/8, 1/4 and 1/2 scale.
    The head is a single 3x3 convolution followed by a per-pixel sigmoid.
    """

    def __init__(self, in_channels: int = 1, out_channels: int = 3):
        super().__init__()
        self.in_channels = in_channels
        e = ENCODER_WIDTHS
        self.stem = nn.Sequential(nn.Conv2d(in_channels, e[0], 7, 2, 3, bias=False), nn.BatchNorm2d(e[0]),
                                  nn.ReLU(inplace=True))
        self.pool = nn.MaxPool2d(3, 2, 1)
        self.layer1 = _stage(e[0], e[1], 1)
        self.layer2 = _stage(e[1], e[2], 2)
        self.layer3 = _stage(e[2], e[3], 2)
        self.layer4 = _stage(e[3], e[4], 2)
        skips = (e[3], e[2], e[1], e[0], 0)
        prev = e[4]
        dec = []
        for width, skip in zip(DECODER_WIDTHS, skips):
            dec.append(ResidualBlock(prev + skip, width))
            prev = width
        self.decoder = nn.ModuleList(dec)
        self.head = nn.Conv2d(DECODER_WIDTHS[-1], out_channels, 3, 1, 1)

    def forward(self, x: torch.Tensor) -> ForwardResult:
        if x.dim() != 4 or x.shape[1] != self.in_channels or x.shape[-2] % 32 or x.shape[-1] % 32:
            raise ShapeError(f"expected (n, {self.in_channels}, H, W) with H, W divisible by 32, "
                             f"got {tuple(x.shape)}")
        s0 = self.stem(x)  # 1/2
        s1 = self.layer1(self.pool(s0))  # 1/4
        s2 = self.layer2(s1)  # 1/8
        s3 = self.layer3(s2)  # 1/16
        bottleneck = self.layer4(s3)  # 1/32
        y = bottleneck
        for block, skip in zip(self.decoder, (s3, s2, s1, s0, None)):
            y = F.interpolate(y, scale_factor=2, mode="bilinear", align_corners=False)
            if skip is not None:
                y = torch.cat([y, skip], dim=1)
            y = block(y)
        return ForwardResult(torch.sigmoid(self.head(y)), bottleneck)


class Discriminator(nn.Module):
    """Five 3x3 stride-1 convolutions; the first four followed by LeakyReLU(0.2) and 2x max pooling.

    ``space='output'`` consumes the 3-channel probability map,
    ``space='feature'`` the 512-channel encoder bottleneck.  The last layer
    emits raw patch scores.
    """

    def __init__(self, space: str = "output"):
        super().__init__()
        if space not in ("output", "feature"):
            raise ValueError(f"space must be 'output' or 'feature', got {space!r}")
        self.space = space
        self.in_channels = 3 if space == "output" else ENCODER_WIDTHS[-1]
        layers = []
        prev = self.in_channels
        for width in DISC_WIDTHS:
            layers += [nn.Conv2d(prev, width, 3, 1, 1), nn.LeakyReLU(0.2, inplace=True),
                       nn.MaxPool2d(2, 2, ceil_mode=True)]
            prev = width
        layers.append(nn.Conv2d(prev, 1, 3, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, p: torch.Tensor) -> torch.Tensor:
        if p.dim() != 4 or p.shape[1] != self.in_channels:
            raise ShapeError(f"{self.space}-space discriminator expects {self.in_channels} channels, "
                             f"got input {tuple(p.shape)}")
        return self.net(p)


def dice_loss(p: torch.Tensor, y: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Soft Dice loss summed over (c, h, w), averaged over the batch.

    ``eps`` is added to both numerator and denominator so empty masks give 0.
    """
    if p.shape != y.shape:
        raise ShapeError(f"prediction {tuple(p.shape)} and target {tuple(y.shape)} differ")
    dims = tuple(range(1, p.dim()))
    num = 2.0 * (y * p).sum(dims) + eps
    den = (y * y).sum(dims) + (p * p).sum(dims) + eps
    return (1.0 - num / den).mean()
