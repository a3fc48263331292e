"""Mask attention and the three-block decoder with segmentation head."""
from __future__ import annotations

import torch
from torch import nn

from .layers import ConvBNReLU, resize_mask, upsample


class MaskAttention(nn.Module):
    """out = C1x1( C3x3(f * m) ++ C3x3(f) ), with m a single-channel mask broadcast over f."""

    def __init__(self, channels: int):
        super().__init__()
        self.masked = ConvBNReLU(channels, channels)
        self.plain = ConvBNReLU(channels, channels)
        self.merge = ConvBNReLU(2 * channels, channels, kernel=1)

    def forward(self, f_map: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        if m.shape[-2:] != f_map.shape[-2:] or m.shape[1] != 1:
            raise ValueError(f"mask {tuple(m.shape)} does not fit feature map {tuple(f_map.shape)}")
        gated = f_map * m
        return self.merge(torch.cat([self.masked(gated), self.plain(f_map)], dim=1))


class DecoderBlock(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, scale: int):
        super().__init__()
        self.convs = nn.Sequential(ConvBNReLU(in_ch + skip_ch, out_ch), ConvBNReLU(out_ch, out_ch))
        self.attn = MaskAttention(out_ch)
        self.scale = scale

    def forward(self, x, skip, mask):
        if x.shape[-2:] != skip.shape[-2:]:
            raise ValueError(f"decoder input {tuple(x.shape)} and skip {tuple(skip.shape)} differ in size")
        x = self.convs(torch.cat([x, skip], dim=1))
        x = self.attn(x, resize_mask(mask, x.shape[-2:]))
        return upsample(x, self.scale)


class Decoder(nn.Module):
    """d1 (skip f4, x2) -> d2 (skip f3, x2) -> d3 (skip f2, x4) -> x2 -> image concat -> head.

    The final x2 brings stride-2 features to input resolution before the image
    concatenation.
    """

    def __init__(self, in_ch: int, encoder_channels, width: int, head_width: int = 32):
        super().__init__()
        _, c2, c3, c4 = encoder_channels
        self.d1 = DecoderBlock(in_ch, c4, width, 2)
        self.d2 = DecoderBlock(width, c3, width, 2)
        self.d3 = DecoderBlock(width, c2, width, 4)
        self.head_convs = nn.Sequential(ConvBNReLU(width + 3, head_width), ConvBNReLU(head_width, head_width))
        self.head_attn = MaskAttention(head_width)
        self.out = nn.Conv2d(head_width, 1, 1)

    def forward(self, unified, pyramid, mask, image):
        _, f2, f3, f4 = pyramid
        x = self.d1(unified, f4, mask)
        x = self.d2(x, f3, mask)
        x = self.d3(x, f2, mask)
        x = upsample(x, 2)
        if x.shape[-2:] != image.shape[-2:]:
            raise ValueError(f"decoder output {tuple(x.shape[-2:])} does not reach image size {tuple(image.shape[-2:])}")
        x = self.head_convs(torch.cat([x, image], dim=1))
        x = self.head_attn(x, mask)
        return torch.sigmoid(self.out(x))
