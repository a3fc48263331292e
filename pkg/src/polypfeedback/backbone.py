"""Four-stage pyramid encoders (strides 4/8/16/32) and the encoder weights archive.

Two variants share one contract: ``forward(images) -> [f1, f2, f3, f4]`` with
``f_i`` of shape B×C_i×(H/2^(i+1))×(W/2^(i+1)).

* ``PyramidTransformerEncoder``: overlapping patch embeddings, spatial-reduction
  attention and a feed-forward with a depthwise convolution.
* ``TinyConvEncoder``: strided conv blocks, for fast tests.

Parameter names follow ``stages.<stage>.<block>.<layer>``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .layers import ConvBNReLU

WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class EncoderSpec:
    channels: tuple[int, int, int, int] = (64, 128, 320, 512)
    depths: tuple[int, int, int, int] = (2, 2, 2, 2)
    heads: tuple[int, int, int, int] = (1, 2, 5, 8)
    sr_ratios: tuple[int, int, int, int] = (8, 4, 2, 1)
    variant: str = "pyramid-transformer"
    mlp_ratio: int = 4


class OverlapPatchEmbed(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, patch: int, stride: int):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, out_ch, patch, stride, patch // 2)
        self.norm = nn.LayerNorm(out_ch)

    def forward(self, x):
        x = self.proj(x)
        _, _, h, w = x.shape
        return self.norm(x.flatten(2).transpose(1, 2)), h, w


class SRAttention(nn.Module):
    """Multi-head attention whose keys/values come from a spatially reduced map."""

    def __init__(self, dim: int, heads: int, sr_ratio: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, sr_ratio, sr_ratio)
            self.sr_norm = nn.LayerNorm(dim)
        self.keep_attn = False
        self.last_attn: torch.Tensor | None = None

    def forward(self, x, h, w):
        b, n, c = x.shape
        d = c // self.heads
        q = self.q(x).reshape(b, n, self.heads, d).transpose(1, 2)
        if self.sr_ratio > 1:
            kv_in = self.sr(x.transpose(1, 2).reshape(b, c, h, w))
            kv_in = self.sr_norm(kv_in.flatten(2).transpose(1, 2))
        else:
            kv_in = x
        kv = self.kv(kv_in).reshape(b, -1, 2, self.heads, d).permute(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        attn = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)
        if self.keep_attn:
            self.last_attn = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class MixFFN(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, 1, 1, groups=hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, h, w):
        x = self.fc1(x)
        b, n, c = x.shape
        x = self.dwconv(x.transpose(1, 2).reshape(b, c, h, w)).flatten(2).transpose(1, 2)
        return self.fc2(F.gelu(x))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, sr_ratio: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SRAttention(dim, heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MixFFN(dim, dim * mlp_ratio)

    def forward(self, x, h, w):
        x = x + self.attn(self.norm1(x), h, w)
        return x + self.mlp(self.norm2(x), h, w)


class TransformerStage(nn.Module):
    def __init__(self, in_ch, dim, depth, heads, sr_ratio, mlp_ratio, first):
        super().__init__()
        self.embed = OverlapPatchEmbed(in_ch, dim, 7 if first else 3, 4 if first else 2)
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads, sr_ratio, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        x, h, w = self.embed(x)
        for blk in self.blocks:
            x = blk(x, h, w)
        x = self.norm(x)
        return x.transpose(1, 2).reshape(x.shape[0], -1, h, w)


class PyramidTransformerEncoder(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        ins = (3,) + tuple(spec.channels[:3])
        self.stages = nn.ModuleList(
            TransformerStage(ins[i], spec.channels[i], spec.depths[i], spec.heads[i],
                             spec.sr_ratios[i], spec.mlp_ratio, first=i == 0)
            for i in range(4)
        )
        self.apply(_init_transformer)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def _init_transformer(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.Conv2d):
        fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels // m.groups
        nn.init.normal_(m.weight, 0.0, math.sqrt(2.0 / fan_out))
        if m.bias is not None:
            nn.init.zeros_(m.bias)


class ConvStage(nn.Sequential):
    def __init__(self, in_ch, out_ch, depth, first):
        layers = [ConvBNReLU(in_ch, out_ch, 3, stride=2)]
        if first:
            layers.append(ConvBNReLU(out_ch, out_ch, 3, stride=2))
        layers += [ConvBNReLU(out_ch, out_ch, 3) for _ in range(max(depth - 1, 0))]
        super().__init__(*layers)


class TinyConvEncoder(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        ins = (3,) + tuple(spec.channels[:3])
        self.stages = nn.ModuleList(
            ConvStage(ins[i], spec.channels[i], spec.depths[i], first=i == 0) for i in range(4)
        )

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def build_encoder(spec: EncoderSpec) -> nn.Module:
    if spec.variant == "pyramid-transformer":
        return PyramidTransformerEncoder(spec)
    if spec.variant == "tiny-conv":
        return TinyConvEncoder(spec)
    raise ValueError(f"unknown encoder variant {spec.variant!r}")


def pyramid_shapes(image_size: int, channels) -> list[tuple[int, int, int]]:
    """Expected (C, h, w) for each of the four maps."""
    if image_size % 32:
        raise ValueError(f"image size {image_size} not divisible by 32")
    return [(c, image_size // 2 ** (i + 2), image_size // 2 ** (i + 2)) for i, c in enumerate(channels)]


# weights archive

class WeightsMismatch(RuntimeError):
    def __init__(self, report: "LoadReport"):
        super().__init__(str(report))
        self.report = report


@dataclass
class LoadReport:
    missing: list[str] = field(default_factory=list)
    unexpected: list[str] = field(default_factory=list)
    mismatched: list[tuple[str, tuple, tuple]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.missing or self.unexpected or self.mismatched)

    def __str__(self) -> str:
        parts = []
        if self.missing:
            parts.append("missing keys: " + ", ".join(self.missing))
        if self.unexpected:
            parts.append("unexpected keys: " + ", ".join(self.unexpected))
        for name, want, got in self.mismatched:
            parts.append(f"shape mismatch for {name}: expected {want}, archive has {got}")
        return "; ".join(parts) or "ok"


def save_weights(module: nn.Module, path: str | Path, spec: EncoderSpec | None = None) -> None:
    payload = {"version": WEIGHTS_VERSION,
               "spec": None if spec is None else spec.__dict__,
               "tensors": {k: v.detach().cpu().clone() for k, v in module.state_dict().items()}}
    torch.save(payload, path)


def load_pretrained(module: nn.Module, path: str | Path, strict: bool = True) -> LoadReport:
    """Install archived tensors into ``module``; every problem is listed in the report.

    Tensors whose shape matches are installed even in non-strict mode; in
    strict mode any problem raises WeightsMismatch and nothing is installed.
    """
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("version") != WEIGHTS_VERSION:
        raise ValueError(f"unsupported weights archive version {payload.get('version')}")
    tensors = payload["tensors"]
    own = module.state_dict()
    report = LoadReport(
        missing=sorted(set(own) - set(tensors)),
        unexpected=sorted(set(tensors) - set(own)),
    )
    usable = {}
    for name in sorted(set(own) & set(tensors)):
        if own[name].shape != tensors[name].shape:
            report.mismatched.append((name, tuple(own[name].shape), tuple(tensors[name].shape)))
        else:
            usable[name] = tensors[name]
    if strict and not report.ok:
        raise WeightsMismatch(report)
    module.load_state_dict(usable, strict=False)
    return report
