"""Bridge: fuse the enhanced feature map, the feedback mask and the prompt embedding."""
from __future__ import annotations

import torch
from torch import nn

from .layers import ConvBNReLU, resize_mask


class Bridge(nn.Module):
    def __init__(self, width: int, embed_dim: int):
        super().__init__()
        self.pre = nn.Sequential(ConvBNReLU(width, width), ConvBNReLU(width, width))
        self.text_proj = nn.Linear(embed_dim, width)
        self.post = ConvBNReLU(width, width)

    def forward(self, fed: torch.Tensor, mask: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        if mask.dim() != 4 or mask.shape[1] != 1 or mask.shape[0] != fed.shape[0]:
            raise ValueError(f"mask must be B×1×H×W matching batch {fed.shape[0]}, got {tuple(mask.shape)}")
        if emb.shape != (fed.shape[0], self.text_proj.in_features):
            raise ValueError(f"embedding shape {tuple(emb.shape)} does not match batch/embed_dim")
        x = fed + resize_mask(mask, fed.shape[-2:])  # one mask channel broadcast over features
        x = self.pre(x)
        x = x + self.text_proj(emb)[:, :, None, None]
        return self.post(x)
