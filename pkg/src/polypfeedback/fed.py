"""Feature enhancement block: progressive pyramid fusion, then parallel dilated convs."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .layers import ConvBNReLU

DILATIONS = (6, 12, 18)


def _two_convs(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(ConvBNReLU(in_ch, out_ch), ConvBNReLU(out_ch, out_ch))


class FEDBlock(nn.Module):
    """Fuses f1..f4 into one stride-32 map of ``width`` channels.

    f1 is convolved and max-pooled down to each coarser level, where the next
    pyramid map is concatenated. The fused map goes through a 1x1 conv (the
    shortcut S), three dilated 3x3 branches plus S itself are concatenated and
    merged by a 1x1 conv, and S is added back before the final ReLU.
    """

    def __init__(self, in_channels, width: int = 128, dilations=DILATIONS):
        super().__init__()
        c1, c2, c3, c4 = in_channels
        self.fuse = nn.ModuleList([
            _two_convs(c1, width),
            _two_convs(width + c2, width),
            _two_convs(width + c3, width),
            _two_convs(width + c4, width),
        ])
        self.shortcut = ConvBNReLU(width, width, kernel=1)
        self.dilated = nn.ModuleList(ConvBNReLU(width, width, 3, dilation=d) for d in dilations)
        self.merge = ConvBNReLU(width * (len(dilations) + 1), width, kernel=1)
        self.width = width

    def forward(self, pyramid):
        f1, f2, f3, f4 = pyramid
        x =self.fuse[0](f1)
        for conv, skip in zip(self.fuse[1:], (f2, f3, f4)):
            x = F.max_pool2d(x, 2)
            if x.shape[-2:] != skip.shape[-2:]:
                raise ValueError(f"pyramid shape mismatch: {tuple(x.shape[-2:])} vs {tuple(skip.shape[-2:])}")
            x = conv(torch.cat([x, skip], dim=1))
        s = self.shortcut(x)
        branches = [branch(s) for branch in self.dilated] + [s]
        return F.relu(self.merge(torch.cat(branches, dim=1)) + s)
