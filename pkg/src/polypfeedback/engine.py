"""Training with epoch-level feedback masks, validation, schedule, checkpoints and refinement."""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import metrics
from .attributes import build_prompt, derive_gt_attributes, logits_to_attributes
from .config import RunConfig, validate_config
from .data import DatasetManifest, augment, load_arrays, sample_rng
from .losses import LossReport, total_loss
from .model import FeedbackSegNet
from .seed_mask import MaskBank, init_bank, otsu_mask, refresh_bank
from .text import BPETokenizer

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("epoch", "lr", "train_bce", "train_dice", "train_attr", "val_dsc", "val_hd")


class NumericError(FloatingPointError):
    pass


def build_model(cfg: RunConfig, tokenizer: BPETokenizer | None = None) -> FeedbackSegNet:
    torch.manual_seed(cfg.seed)
    return FeedbackSegNet(cfg, tokenizer)


def make_optimizer(model: torch.nn.Module, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)


@dataclass
class TrainState:
    model: FeedbackSegNet
    optimizer: torch.optim.Optimizer
    bank: MaskBank
    epoch: int = 0  # completed epochs
    lr: float = 1e-4
    best_val_dsc: float = -math.inf
    epochs_since_improve: int = 0
    plateau_count: int = 0
    history: list[dict] = field(default_factory=list)

    def set_lr(self, lr: float) -> None:
        self.lr = lr
        for g in self.optimizer.param_groups:
            g["lr"] = lr


@dataclass
class EvalResult:
    rows: list[metrics.MetricRow]
    summary: metrics.MetricRow
    count_accuracy: float
    attr_accuracy: float
    pred_masks: dict[str, np.ndarray]


def _to_tensor(images: np.ndarray, masks: np.ndarray, dtype=torch.float32):
    x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).to(dtype)
    m = torch.from_numpy(np.ascontiguousarray(masks)).unsqueeze(1).to(dtype)
    return x, m


# refinement

@torch.no_grad()
def refine(model: FeedbackSegNet, images: np.ndarray, iterations: int, batch_size: int = 16,
           init_masks: np.ndarray | None = None):
    """Otsu-seeded test-time refinement on N×H×W×3 images.

    m0 = Otsu(image); p_t = f(image, m_{t-1}); m_t = p_t > 0.5. Returns
    (final probabilities, list of masks m0..m_T, final attribute logits).
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    images = np.asarray(images, dtype=np.float32)
    mask = np.stack([otsu_mask(im) for im in images]) if init_masks is None else init_masks
    history = [mask.astype(np.uint8)]
    was_training = model.training
    model.eval()
    try:
        for _ in range(iterations):
            probs, logits = [], []
            for i in range(0, len(images), batch_size):
                x, m = _to_tensor(images[i:i + batch_size], history[-1][i:i + batch_size])
                out = model(x, m)
                probs.append(out["pred"][:, 0].numpy())
                logits.append(out["logits"].numpy())
            probs = np.concatenate(probs)
            logits = np.concatenate(logits)
            history.append((probs > 0.5).astype(np.uint8))
    finally:
        model.train(was_training)
    return probs, history, logits


def evaluate(model: FeedbackSegNet, images: Mapping[str, np.ndarray], masks: Mapping[str, np.ndarray],
             stems: Sequence[str], iterations: int = 3, thresholds=(0.02, 0.12)) -> EvalResult:
    stems = list(stems)
    if not stems:
        raise ValueError("nothing to evaluate")
    imgs = np.stack([images[s] for s in stems])
    probs, history, logits = refine(model, imgs, iterations)
    final = history[-1]
    rows, count_hits, attr_hits = [], 0, 0
    for i, s in enumerate(stems):
        rows.append(metrics.score_pair(s, final[i], masks[s]))
        gt = derive_gt_attributes(masks[s], thresholds)
        pred = logits_to_attributes(logits[i])
        count_hits += pred.many == gt.many
        attr_hits += sum(a == b for a, b in zip(pred.as_vector(), gt.as_vector()))
    return EvalResult(rows, metrics.aggregate(rows), count_hits / len(stems),
                      attr_hits / (4 * len(stems)), {s: final[i] for i, s in enumerate(stems)})


@torch.no_grad()
def infer_one(model: FeedbackSegNet, image: np.ndarray, iterations: int = 3):
    """Returns (probability map H×W, binary mask H×W, PolypAttributes, prompt)."""
    probs, history, logits = refine(model, image[None], iterations)
    attrs = logits_to_attributes(logits[0])
    return probs[0], history[-1][0], attrs, build_prompt(attrs)


# training

class Trainer:
    """Holds the data arrays and runs epochs over a manifest."""

    def __init__(self, cfg: RunConfig, manifest: DatasetManifest, arrays: tuple[dict, dict] | None = None):
        self.cfg = cfg
        self.manifest = manifest
        self.train_stems = sorted(manifest.stems("train"))
        self.val_stems = sorted(manifest.stems("val"))
        if not self.train_stems:
            raise ValueError("manifest has no training samples")
        if not self.val_stems:
            raise ValueError("manifest has no validation samples")
        if arrays is None:
            recs = manifest.split("train") + manifest.split("val")
            arrays = load_arrays(recs, cfg.image_size)
        self.images, self.masks = arrays
        self.bank_stems = sorted(self.train_stems + self.val_stems)
        self.otsu = {s: otsu_mask(self.images[s]) for s in self.train_stems}

    def init_state(self) -> TrainState:
        model = build_model(self.cfg)
        opt = make_optimizer(model, self.cfg.learning_rate)
        bank = init_bank({s: self.images[s] for s in self.bank_stems})
        return TrainState(model, opt, bank, lr=self.cfg.learning_rate)

    def _augmented(self, stem: str, epoch: int, bank: MaskBank):
        rng = sample_rng(self.cfg.seed, epoch, stem)
        # some samples restart from their Otsu seed, the state test-time refinement begins in
        feedback = self.otsu[stem] if rng.random() < self.cfg.otsu_mix else bank[stem]
        pair = augment(self.images[stem], self.masks[stem], feedback, rng, self.cfg.rotation_degrees)
        attrs = derive_gt_attributes(pair.gt_mask, self.cfg.size_thresholds)
        return pair, attrs

    def batches(self, epoch: int) -> list[list[str]]:
        order = np.random.default_rng([self.cfg.seed, epoch + 1, 0x5EED]).permutation(len(self.train_stems))
        stems = [self.train_stems[i] for i in order]
        bs = self.cfg.batch_size
        return [stems[i:i + bs] for i in range(0, len(stems), bs)]

    def train_epoch(self, state: TrainState) -> LossReport:
        cfg, model, epoch = self.cfg, state.model, state.epoch
        model.train()
        sums = np.zeros(4)
        seen = 0
        pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 0 else None
        try:
            for b, stems in enumerate(self.batches(epoch)):
                fn = lambda s: self._augmented(s, epoch, state.bank)  # noqa: E731
                items = list(pool.map(fn, stems)) if pool else [fn(s) for s in stems]
                img = np.stack([p.image for p, _ in items])
                gt = np.stack([p.gt_mask for p, _ in items])
                inp = np.stack([p.input_mask for p, _ in items])
                gt_attrs = [a for _, a in items]
                x, m = _to_tensor(img, inp)
                target = torch.from_numpy(gt).unsqueeze(1).float()
                attr_t = torch.tensor([a.as_vector() for a in gt_attrs])
                out = model(x, m, attrs=gt_attrs if cfg.teacher_forcing else None)
                loss, rep = total_loss(out["pred"], target, out["logits"], attr_t, cfg.lambda_attr)
                if not torch.isfinite(loss):
                    raise NumericError(f"non-finite loss at epoch {epoch} batch {b}: {rep}")
                state.optimizer.zero_grad(set_to_none=True)
                loss.backward()
                state.optimizer.step()
                n = len(stems)
                sums += n * np.array([rep.total, rep.bce, rep.dice, rep.attr])
                seen += n
        finally:
            if pool:
                pool.shutdown()
        state.bank = refresh_bank(state.bank, model, {s: self.images[s] for s in self.bank_stems})
        state.epoch += 1
        return LossReport(*(sums / seen))

    def validate(self, state: TrainState) -> EvalResult:
        return evaluate(state.model, self.images, self.masks, self.val_stems,
                        self.cfg.refine_iterations, self.cfg.size_thresholds)

    def step_schedule(self, state: TrainState, val_dsc: float) -> bool:
        """Update best/patience/plateau counters; returns True when validation improved."""
        improved = val_dsc > state.best_val_dsc
        if improved:
            state.best_val_dsc = val_dsc
            state.epochs_since_improve = 0
            state.plateau_count = 0
        else:
            state.epochs_since_improve += 1
            state.plateau_count += 1
            if state.plateau_count >= self.cfg.plateau_patience:
                state.set_lr(state.lr * self.cfg.plateau_factor)
                state.plateau_count = 0
        return improved

    def should_stop(self, state: TrainState) -> bool:
        return state.epochs_since_improve >= self.cfg.patience or state.epoch >= self.cfg.max_epochs


def fit(cfg: RunConfig, manifest: DatasetManifest, out_dir: str | Path, resume: str | Path | None = None,
        stop_after: int | None = None, arrays=None) -> TrainState:
    """Train until early stopping or max_epochs; writes best.ckpt, last.ckpt and train_log.csv.

    ``stop_after`` ends the call after that many completed epochs (an
    interruption); resuming from last.ckpt continues exactly.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, manifest, arrays)
    if resume is not None:
        state = load_checkpoint(resume, cfg=cfg)
    else:
        state = trainer.init_state()
    while not trainer.should_stop(state):
        if stop_after is not None and state.epoch >= stop_after:
            break
        lr_used = state.lr
        rep = trainer.train_epoch(state)
        val = trainer.validate(state)
        improved = trainer.step_schedule(state, val.summary.dsc)
        state.history.append({"epoch": state.epoch, "lr": lr_used, "train_bce": rep.bce,
                              "train_dice": rep.dice, "train_attr": rep.attr,
                              "val_dsc": val.summary.dsc, "val_hd": val.summary.hd})
        log.info("epoch %d lr %.3g loss %.4f (bce %.4f dice %.4f attr %.4f) val dsc %.4f hd %.2f count-acc %.3f",
                 state.epoch, lr_used, rep.total, rep.bce, rep.dice, rep.attr,
                 val.summary.dsc, val.summary.hd, val.count_accuracy)
        if improved:
            save_checkpoint(state, out / "best.ckpt")
        save_checkpoint(state, out / "last.ckpt")
        write_train_log(state.history, out / "train_log.csv")
    return state


def write_train_log(history: Sequence[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])


def read_train_log(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


# checkpoints

def save_checkpoint(state: TrainState, path: str | Path) -> None:
    cfg = state.model.cfg
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "bank": state.bank.to_dict(),
        "tokenizer": state.model.tokenizer.to_dict(),
        "engine": {"epoch": state.epoch, "lr": state.lr, "best_val_dsc": state.best_val_dsc,
                   "epochs_since_improve": state.epochs_since_improve,
                   "plateau_count": state.plateau_count, "history": state.history},
        "rng": torch.get_rng_state(),
    }
    tmp = Path(str(path) + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path, cfg: RunConfig | None = None) -> TrainState:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    saved = validate_config(payload["config"])
    if saved.digest() != payload["config_hash"]:
        raise ValueError("checkpoint config hash does not match its config")
    if cfg is not None and cfg.digest() != saved.digest():
        # only the stopping horizon may differ when resuming
        if validate_config({**cfg.to_dict(), "max_epochs": saved.max_epochs}).digest() != saved.digest():
            raise ValueError("config differs from the checkpoint's config")
        saved = cfg
    model = FeedbackSegNet(saved, BPETokenizer.from_dict(payload["tokenizer"]))
    model.load_state_dict(payload["model"])
    opt = make_optimizer(model, payload["engine"]["lr"])
    opt.load_state_dict(payload["optimizer"])
    eng = payload["engine"]
    state = TrainState(model, opt, MaskBank.from_dict(payload["bank"]), eng["epoch"], eng["lr"],
                       eng["best_val_dsc"], eng["epochs_since_improve"], eng["plateau_count"],
                       list(eng["history"]))
    torch.set_rng_state(payload["rng"])
    return state


def load_model(path: str | Path) -> FeedbackSegNet:
    model = load_checkpoint(path).model
    model.eval()
    return model
