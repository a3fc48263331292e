"""Dataset ingestion, deterministic splits, joint augmentation and a synthetic polyp generator.

On-disk layout::

    root/images/<stem>.png|jpg     RGB image
    root/masks/<stem>.png          8-bit mask, foreground > 127
    root/attributes.jsonl          optional, {"stem", "many", "small", "medium", "large"} per line
    root/splits/{train,val,test}.txt   optional explicit split, one stem per line
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import cv2
import numpy as np
from PIL import Image

from .attributes import PolypAttributes, derive_gt_attributes, label_components

IMAGE_EXTS = (".png", ".jpg", ".jpeg")
SPLITS = ("train", "val", "test")
MASK_THRESHOLD = 127


class DatasetError(Exception):
    """Raised for missing files, unmatched stems or inconsistent sizes."""


@dataclass
class SampleRecord:
    stem: str
    image_path: Path
    mask_path: Path
    split: str
    attributes: PolypAttributes | None = None


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    root: Path | None = None

    @property
    def split_counts(self) -> tuple[int, int, int]:
        return tuple(sum(r.split == s for r in self.records) for s in SPLITS)

    def split(self, name: str) -> list[SampleRecord]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [r for r in self.records if r.split == name]

    def stems(self, name: str | None = None) -> list[str]:
        recs = self.records if name is None else self.split(name)
        return [r.stem for r in recs]


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """Validation and test sizes are rounded; training takes the remainder."""
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    return n - n_val - n_test, n_val, n_test


def assign_splits(stems: Sequence[str], ratios: Sequence[float], seed: int) -> dict[str, str]:
    stems = sorted(stems)
    n_train, n_val, _ = split_sizes(len(stems), ratios)
    order = np.random.default_rng(seed).permutation(len(stems))
    out = {}
    for rank, idx in enumerate(order):
        out[stems[idx]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return out


def read_split_files(split_dir: Path) -> dict[str, str]:
    out = {}
    for name in SPLITS:
        f = split_dir / f"{name}.txt"
        if f.exists():
            for line in f.read_text().splitlines():
                if line.strip():
                    out[line.strip()] = name
    return out


def write_split_files(manifest: DatasetManifest, split_dir: str | Path) -> None:
    split_dir = Path(split_dir)
    split_dir.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        (split_dir / f"{name}.txt").write_text("".join(f"{s}\n" for s in manifest.stems(name)))


def _index(directory: Path, exts) -> dict[str, Path]:
    if not directory.is_dir():
        raise DatasetError(f"missing directory {directory}")
    found: dict[str, Path] = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in exts:
            if p.stem in found:
                raise DatasetError(f"duplicate stem {p.stem!r} in {directory}")
            found[p.stem] = p
    return found


def _read_attributes(path: Path) -> dict[str, PolypAttributes]:
    out = {}
    for line in path.read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            out[d["stem"]] = PolypAttributes(d["many"], d["small"], d["medium"], d["large"])
    return out


def ingest(root: str | Path, split_spec: Sequence[float] | Mapping[str, Sequence[str]] = (0.8, 0.1, 0.1),
           seed: int = 42, check_sizes: bool = True) -> DatasetManifest:
    """Index ``root/images`` and ``root/masks`` into a manifest with a deterministic split.

    ``split_spec`` is a (train, val, test) ratio triple or a mapping
    split name -> stems. Explicit ``root/splits`` files take precedence over ratios.
    """
    root = Path(root)
    images = _index(root / "images", IMAGE_EXTS)
    masks = _index(root / "masks", (".png",)) if (root / "masks").is_dir() else {}
    if not images:
        raise DatasetError(f"no images found in {root / 'images'}")
    missing = sorted(set(images) - set(masks))
    if missing:
        raise DatasetError(f"missing masks for stems: {', '.join(missing)}")

    if isinstance(split_spec, Mapping):
        assignment = {s: name for name, stems in split_spec.items() for s in stems}
    elif (root / "splits").is_dir():
        assignment = read_split_files(root / "splits")
    else:
        assignment = assign_splits(list(images), split_spec, seed)
    unknown = sorted(set(assignment) - set(images))
    if unknown:
        raise DatasetError(f"split names stems without images: {', '.join(unknown)}")

    attrs = {}
    if (root / "attributes.jsonl").exists():
        attrs = _read_attributes(root / "attributes.jsonl")

    records = []
    for stem in sorted(images):
        if stem not in assignment:
            continue
        if check_sizes:
            with Image.open(images[stem]) as im, Image.open(masks[stem]) as mk:
                if im.size != mk.size:
                    raise DatasetError(f"size mismatch for {stem!r}: image {im.size} vs mask {mk.size}")
        records.append(SampleRecord(stem, images[stem], masks[stem], assignment[stem], attrs.get(stem)))
    return DatasetManifest(records, root)


def load_image(path: str | Path, size: int | None = None) -> np.ndarray:
    """RGB float32 in [0, 1], optionally resized (bilinear) to size×size."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def load_mask(path: str | Path, size: int | None = None) -> np.ndarray:
    """Binary uint8 mask, binarized at 127 before nearest-neighbour resizing."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    mask = (arr > MASK_THRESHOLD).astype(np.uint8)
    if size is not None and mask.shape != (size, size):
        mask = cv2.resize(mask, (size, size), interpolation=cv2.INTER_NEAREST)
    return mask


def load_arrays(records: Sequence[SampleRecord], size: int) -> tuple[dict, dict]:
    images, masks = {}, {}
    for r in records:
        images[r.stem] = load_image(r.image_path, size)
        masks[r.stem] = load_mask(r.mask_path, size)
    return images, masks


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def save_image(image: np.ndarray, path: str | Path) -> None:
    arr = image if image.dtype == np.uint8 else np.clip(np.rint(image * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


# augmentation

def sample_rng(seed: int, epoch: int, stem: str) -> np.random.Generator:
    """Per-(seed, epoch, stem) generator; independent of batch order and worker count."""
    return np.random.default_rng([seed, epoch + 1, zlib.crc32(stem.encode())])


@dataclass
class AugmentedPair:
    image: np.ndarray
    gt_mask: np.ndarray
    input_mask: np.ndarray
    ops: list[str] = field(default_factory=list)


def rotate(arr: np.ndarray, degrees: float, nearest: bool) -> np.ndarray:
    h, w = arr.shape[:2]
    mat = cv2.getRotationMatrix2D(((w - 1) / 2, (h - 1) / 2), degrees, 1.0)
    interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    return cv2.warpAffine(arr, mat, (w, h), flags=interp, borderMode=cv2.BORDER_REFLECT_101)


def coarse_dropout(image: np.ndarray, rng: np.random.Generator, max_holes: int = 3,
                   max_side: float = 0.4) -> np.ndarray:
    """Zero 1..max_holes rectangles; each side is at most ``max_side`` of the image (area <= 16%)."""
    h, w = image.shape[:2]
    out = image.copy()
    for _ in range(int(rng.integers(1, max_holes + 1))):
        rh = int(rng.integers(1, max(2, int(max_side * h) + 1)))
        rw = int(rng.integers(1, max(2, int(max_side * w) + 1)))
        y = int(rng.integers(0, h - rh + 1))
        x = int(rng.integers(0, w - rw + 1))
        out[y:y + rh, x:x + rw] = 0
    return out


def augment(image: np.ndarray, gt_mask: np.ndarray, input_mask: np.ndarray,
            rng: np.random.Generator, rotation_degrees: float = 30.0, p: float = 0.5) -> AugmentedPair:
    """Jointly flip/rotate all three rasters; coarse dropout touches the image only.

    Each of hflip, vflip, rotation and dropout fires independently with probability ``p``.
    """
    img, gt, inp = image, gt_mask, input_mask
    ops = []
    if rng.random() < p:
        img, gt, inp = img[:, ::-1], gt[:, ::-1], inp[:, ::-1]
        ops.append("hflip")
    if rng.random() < p:
        img, gt, inp = img[::-1], gt[::-1], inp[::-1]
        ops.append("vflip")
    if rng.random() < p:
        angle = float(rng.uniform(-rotation_degrees, rotation_degrees))
        img = rotate(np.ascontiguousarray(img), angle, nearest=False)
        gt = rotate(np.ascontiguousarray(gt), angle, nearest=True)
        inp = rotate(np.ascontiguousarray(inp), angle, nearest=True)
        ops.append(f"rotate({angle:.3f})")
    if rng.random() < p:
        img = coarse_dropout(np.ascontiguousarray(img), rng)
        ops.append("dropout")
    return AugmentedPair(np.ascontiguousarray(img), np.ascontiguousarray(gt),
                         np.ascontiguousarray(inp), ops)


# synthetic data

SIZE_CLASSES = {"small": (0.006, 0.016), "medium": (0.035, 0.09), "large": (0.15, 0.24)}


def _smooth_field(rng, size: int, grid: int = 4) -> np.ndarray:
    coarse = rng.random((grid, grid)).astype(np.float32)
    return cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)


def _blob(rng, size: int, area_frac: float, center) -> np.ndarray:
    """Ellipse with harmonically perturbed radius, scaled to roughly ``area_frac`` of the image."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    theta = np.arctan2(dy, dx) - rng.uniform(0, np.pi)
    aspect = rng.uniform(0.7, 1.0)
    amps = rng.uniform(0, 0.08, 3)
    phases = rng.uniform(0, 2 * np.pi, 3)
    wobble = 1 + sum(a * np.cos(k * theta + ph) for k, a, ph in zip((2, 3, 4), amps, phases))
    r0 = np.sqrt(area_frac * size * size / (np.pi * aspect))
    ellipse = np.sqrt((np.cos(theta) / 1.0) ** 2 + (np.sin(theta) / aspect) ** 2)
    return np.hypot(dy, dx) * ellipse <= r0 * wobble


def _place_blobs(rng, size: int, classes: list[str], tries: int = 200) -> list[np.ndarray]:
    blobs: list[np.ndarray] = []
    occupied = np.zeros((size, size), dtype=bool)
    for cls in classes:
        lo, hi = SIZE_CLASSES[cls]
        for _ in range(tries):
            frac = rng.uniform(lo, hi)
            margin = np.sqrt(frac) * size * 0.6
            center = rng.uniform(margin, size - margin, 2)
            blob = _blob(rng, size, frac, center)
            grown = cv2.dilate(blob.astype(np.uint8), np.ones((5, 5), np.uint8)).astype(bool)
            if blob.any() and not (grown & occupied).any():
                blobs.append(blob)
                occupied |= grown
                break
    return blobs


def synth_sample(rng: np.random.Generator, size: int, many_fraction: float = 0.5):
    """One (uint8 RGB image, binary mask) pair."""
    many = rng.random() < many_fraction
    k = int(rng.integers(2, 5)) if many else 1
    if k == 1:
        classes = [str(rng.choice(["small", "medium", "large"]))]
    else:
        pool = ["small", "medium"] + (["large"] if k == 2 else [])
        classes = [str(c) for c in rng.choice(pool, size=k)]
    blobs = _place_blobs(rng, size, classes)
    mask = np.zeros((size, size), dtype=np.uint8)
    for b in blobs:
        mask[b] = 1

    base = np.array([0.55, 0.28, 0.22]) * rng.uniform(0.8, 1.1)
    shade = 0.6 + 0.9 * _smooth_field(rng, size)
    img = base[None, None, :] * shade[..., None]
    tint = np.array([0.8, 0.5, 0.42]) * rng.uniform(0.85, 1.05)
    # dome shading and fine speckle texture inside polyps
    dist = cv2.distanceTransform(mask, cv2.DIST_L2, 3)
    dome = np.zeros_like(dist)
    labels, n = label_components(mask)
    for i in range(1, n + 1):
        region = labels == i
        dome[region] = dist[region] / max(dist[region].max(), 1.0)
    polyp = tint[None, None, :] * (0.8 + 0.25 * dome[..., None])
    polyp += rng.normal(0, 0.04, (size, size, 1))
    img = np.where(mask[..., None] > 0, polyp, img)
    img += rng.normal(0, 0.02, img.shape)
    img = cv2.GaussianBlur(img.astype(np.float32), (3, 3), 0.6)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8), mask


def generate_synthetic(out_dir: str | Path, n: int, seed: int = 0, size: int = 256,
                       many_fraction: float = 0.5, thresholds=(0.02, 0.12)) -> DatasetManifest:
    """Write ``n`` synthetic image/mask pairs plus attributes.jsonl; fully determined by ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    width = max(4, len(str(n - 1)))
    for i in range(n):
        stem = f"syn_{i:0{width}d}"
        rng = np.random.default_rng([seed, i])
        img, mask = synth_sample(rng, size, many_fraction)
        Image.fromarray(img).save(out / "images" / f"{stem}.png")
        save_mask(mask, out / "masks" / f"{stem}.png")
        a = derive_gt_attributes(mask, thresholds)
        lines.append(json.dumps({"stem": stem, "many": a.many, "small": a.small,
                                 "medium": a.medium, "large": a.large}))
    (out / "attributes.jsonl").write_text("\n".join(lines) + "\n")
    return ingest(out, (1.0, 0.0, 0.0), seed)
