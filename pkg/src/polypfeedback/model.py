"""The full feedback-attention segmentation network."""
from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from .attributes import AttributeHead, PolypAttributes, build_prompt, logits_to_attributes
from .backbone import EncoderSpec, build_encoder
from .bridge import Bridge
from .config import RunConfig
from .decoder import Decoder
from .fed import FEDBlock
from .text import BPETokenizer, PromptEmbedder, prompt_tokenizer


class FeedbackSegNet(nn.Module):
    """image (B×3×H×W in [0,1]) + feedback mask (B×1×H×W) -> probabilities B×1×H×W.

    Attribute logits come from the enhanced features; unless ``attrs`` is
    passed (teacher forcing), the prompt is built from the predicted
    attributes.
    """

    def __init__(self, cfg: RunConfig, tokenizer: BPETokenizer | None = None):
        super().__init__()
        self.cfg = cfg
        self.encoder_spec = EncoderSpec(
            channels=tuple(cfg.encoder_channels),
            depths=tuple(cfg.encoder_depths),
            heads=tuple(cfg.encoder_heads),
            sr_ratios=tuple(cfg.sr_ratios),
            variant=cfg.encoder,
        )
        self.encoder = build_encoder(self.encoder_spec)
        self.fed = FEDBlock(cfg.encoder_channels, cfg.fed_channels)
        self.attr_head = AttributeHead(cfg.fed_channels)
        self.embedder = PromptEmbedder(tokenizer or prompt_tokenizer(), cfg.embed_dim)
        self.bridge = Bridge(cfg.fed_channels, cfg.embed_dim)
        self.decoder = Decoder(cfg.fed_channels, cfg.encoder_channels, cfg.decoder_channels, cfg.head_channels)

    @property
    def tokenizer(self) -> BPETokenizer:
        return self.embedder.tokenizer

    def forward(self, image: torch.Tensor, mask: torch.Tensor,
                attrs: Sequence[PolypAttributes] | None = None) -> dict:
        if image.shape[-1] % 32 or image.shape[-2] % 32:
            raise ValueError(f"image size {tuple(image.shape[-2:])} not divisible by 32")
        if mask.shape[-2:] != image.shape[-2:]:
            raise ValueError("feedback mask must match the image size")
        pyramid = self.encoder(image)
        fed = self.fed(pyramid)
        logits = self.attr_head(fed)
        if attrs is None:
            attrs = [logits_to_attributes(row) for row in logits.detach().cpu()]
        prompts = [build_prompt(a) for a in attrs]
        emb = self.embedder(prompts).to(fed.dtype)
        unified = self.bridge(fed, mask, emb)
        pred = self.decoder(unified, pyramid, mask, image)
        return {"pred": pred, "logits": logits, "attrs": list(attrs), "prompts": prompts}


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
