"""Otsu seed masks and the per-sample feedback mask bank."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch

LUMA = (0.299, 0.587, 0.114)


def to_gray8(image: np.ndarray) -> np.ndarray:
    """H×W×3 float image in [0,1] (or uint8) -> uint8 luminance."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    img = img.astype(np.float64)
    gray = img[..., 0] * LUMA[0] + img[..., 1] * LUMA[1] + img[..., 2] * LUMA[2]
    return np.clip(np.rint(gray * 255.0), 0, 255).astype(np.uint8)


def otsu_threshold(image: np.ndarray) -> int:
    """Smallest 8-bit threshold maximizing between-class variance.

    Foreground is ``gray > t``. Scores are compared in exact integer
    arithmetic, so ties resolve to the smallest threshold regardless of
    rounding. A constant image returns its own gray value (empty foreground).
    """
    gray = image if image.ndim == 2 else to_gray8(image)
    hist = np.bincount(np.asarray(gray, dtype=np.uint8).ravel(), minlength=256)
    nonzero = np.flatnonzero(hist)
    if len(nonzero) == 1:
        return int(nonzero[0])

    counts = [int(c) for c in hist]
    total_n = sum(counts)
    total_s = sum(i * c for i, c in enumerate(counts))
    # sigma_b^2 * N^2 = (S0*n1 - S1*n0)^2 / (n0*n1); compare as fractions
    best_t, best_num, best_den = 0, 0, 1
    n0 = s0 = 0
    for t in range(256):
        n0 += counts[t]
        s0 += t * counts[t]
        n1 = total_n - n0
        if n0 == 0 or n1 == 0:
            continue
        s1 = total_s - s0
        num = (s0 * n1 - s1 * n0) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def otsu_mask(image: np.ndarray) -> np.ndarray:
    gray = to_gray8(image)
    return (gray > otsu_threshold(gray)).astype(np.uint8)


def rle_encode(mask: np.ndarray) -> dict:
    flat = np.asarray(mask, dtype=np.uint8).ravel()
    if flat.size and flat.max() > 1:
        raise ValueError("mask is not binary")
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    return {"shape": list(mask.shape), "start": int(flat[0]) if flat.size else 0, "runs": runs}


def rle_decode(blob: Mapping) -> np.ndarray:
    shape = tuple(blob["shape"])
    out = np.empty(int(np.prod(shape)), dtype=np.uint8)
    pos, val = 0, int(blob["start"])
    for run in blob["runs"]:
        out[pos:pos + run] = val
        pos += run
        val ^= 1
    return out.reshape(shape)


@dataclass
class MaskBank:
    """Feedback masks keyed by sample stem, always binary and in the un-augmented frame."""

    entries: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = -1

    def __getitem__(self, stem: str) -> np.ndarray:
        return self.entries[stem]

    def __len__(self) -> int:
        return len(self.entries)

    def stems(self) -> list[str]:
        return sorted(self.entries)

    def to_dict(self) -> dict:
        return {"epoch": self.epoch,
                "entries": {s: rle_encode(self.entries[s]) for s in self.stems()}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MaskBank":
        return cls({s: rle_decode(b) for s, b in d["entries"].items()}, int(d["epoch"]))

    def equals(self, other: "MaskBank") -> bool:
        if self.epoch != other.epoch or self.stems() != other.stems():
            return False
        return all(np.array_equal(self.entries[s], other.entries[s]) for s in self.stems())


def init_bank(images: Mapping[str, np.ndarray]) -> MaskBank:
    """Seed every sample with its Otsu mask (epoch -1)."""
    entries = {}
    for stem in sorted(images):
        img = images[stem]
        if img is None:
            raise FileNotFoundError(f"missing image for sample {stem!r}")
        entries[stem] = otsu_mask(img)
    return MaskBank(entries, epoch=-1)


@torch.no_grad()
def predict_probs(model: torch.nn.Module, images: np.ndarray, masks: np.ndarray,
                  batch_size: int = 16) -> np.ndarray:
    """Eval-mode forward on N×H×W×3 images with N×H×W feedback masks -> N×H×W probabilities."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    try:
        for i in range(0, len(images), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(images[i:i + batch_size])).permute(0, 3, 1, 2).to(dtype)
            m = torch.from_numpy(np.ascontiguousarray(masks[i:i + batch_size])).unsqueeze(1).to(dtype)
            out.append(model(x, m)["pred"][:, 0].double().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out, axis=0)


def refresh_bank(bank: MaskBank, model: torch.nn.Module, images: Mapping[str, np.ndarray],
                 batch_size: int = 16) -> MaskBank:
    """Replace every entry with the model's binarized prediction on the un-augmented image.

    The current entry is the feedback input. Returns a new bank with epoch + 1.
    """
    stems = bank.stems()
    missing = [s for s in stems if s not in images]
    if missing:
        raise KeyError(f"no image for bank entries: {missing[:5]}")
    imgs = np.stack([images[s] for s in stems]).astype(np.float32)
    masks = np.stack([bank.entries[s] for s in stems]).astype(np.float32)
    probs = predict_probs(model, imgs, masks, batch_size)
    new = {s: (p > 0.5).astype(np.uint8) for s, p in zip(stems, probs)}
    return MaskBank(new, bank.epoch + 1)
