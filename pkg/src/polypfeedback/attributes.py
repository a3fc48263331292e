"""Polyp attributes (count and size flags), their ground-truth derivation and prompt text."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
import torch
from scipy import ndimage
from torch import nn

SIZES = ("small", "medium", "large")
EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class PolypAttributes:
    many: bool = False
    small: bool = False
    medium: bool = False
    large: bool = False

    def as_vector(self) -> list[float]:
        return [float(self.many), float(self.small), float(self.medium), float(self.large)]

    @classmethod
    def from_vector(cls, v) -> "PolypAttributes":
        return cls(*(bool(x) for x in v))

    @property
    def empty(self) -> bool:
        return not (self.small or self.medium or self.large)


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    labels, n = ndimage.label(np.asarray(mask).astype(bool), structure=EIGHT_CONNECTED)
    return labels, int(n)


def derive_gt_attributes(mask: np.ndarray, thresholds: tuple[float, float] = (0.02, 0.12)) -> PolypAttributes:
    """Count 8-connected components and bin each by area fraction of the image."""
    t_small, t_large = thresholds
    labels, n = label_components(mask)
    if n == 0:
        return PolypAttributes()
    areas = np.bincount(labels.ravel())[1:] / labels.size
    small = bool((areas < t_small).any())
    large = bool((areas >= t_large).any())
    medium = bool(((areas >= t_small) & (areas < t_large)).any())
    return PolypAttributes(many=n >= 2, small=small, medium=medium, large=large)


def build_prompt(attrs: PolypAttributes) -> str:
    if attrs.empty:
        return "a colorectal image with no polyp"
    sizes = " and ".join(s for s in SIZES if getattr(attrs, s))
    count = "many" if attrs.many else "one"
    plural = "s" if attrs.many else ""
    return f"a colorectal image with {count} {sizes} sized polyp{plural}"


def all_prompts() -> list[str]:
    """The closed grammar: 2 counts x 7 non-empty size subsets, plus the no-polyp prompt."""
    out = []
    for many in (False, True):
        for flags in product((False, True), repeat=3):
            if any(flags):
                out.append(build_prompt(PolypAttributes(many, *flags)))
    out.append(build_prompt(PolypAttributes()))
    return out


def logits_to_attributes(logits) -> PolypAttributes:
    """Threshold each head at sigmoid 0.5; if no size head fires, take the largest size logit."""
    v = [float(x) for x in logits]
    many = v[0] > 0
    sizes = [x > 0 for x in v[1:]]
    if not any(sizes):
        # first index wins ties
        sizes[int(np.argmax(v[1:]))] = True
    return PolypAttributes(many, *sizes)


class AttributeHead(nn.Module):
    """Global average pool followed by four independent one-logit linear heads."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.heads = nn.Linear(in_channels, 4)

    def forward(self, fed: torch.Tensor) -> torch.Tensor:
        pooled = fed.mean(dim=(2, 3))
        return self.heads(pooled)
