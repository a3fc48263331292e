import dataclasses

import numpy as np
import pytest
import torch

from polypfeedback.config import validate_config
from polypfeedback.engine import (LOG_COLUMNS, NumericError, Trainer, fit, infer_one, load_checkpoint, read_train_log,
                                  refine)
from polypfeedback.metrics import MetricRow
from polypfeedback.seed_mask import otsu_mask, predict_probs


def _cfg(base, **kw):
    return validate_config({**base.to_dict(), **kw})


def _params(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def _same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_epoch_independent_of_worker_count(fast_cfg, small_manifest):
    results = []
    for workers in (0, 3):
        tr = Trainer(_cfg(fast_cfg, workers=workers), small_manifest)
        st = tr.init_state()
        rep = tr.train_epoch(st)
        results.append((rep, _params(st.model), st.bank))
    assert results[0][0] == results[1][0]
    assert _same(results[0][1], results[1][1])
    assert results[0][2].equals(results[1][2])


def test_bank_lifecycle(fast_cfg, small_manifest):
    tr = Trainer(fast_cfg, small_manifest)
    st = tr.init_state()
    assert st.bank.epoch == -1
    assert st.bank.stems() == sorted(tr.train_stems + tr.val_stems)
    for s in st.bank.stems():
        assert np.array_equal(st.bank[s], otsu_mask(tr.images[s]))
    before = st.bank
    tr.train_epoch(st)
    assert st.bank.epoch == 0 and st.epoch == 1
    stems = before.stems()
    # the refresh is one un-augmented eval pass fed with the previous entries
    probs = predict_probs(st.model, np.stack([tr.images[s] for s in stems]), np.stack([before[s] for s in stems]))
    for i, s in enumerate(stems):
        assert st.bank[s].dtype == np.uint8 and st.bank[s].shape == (64, 64)
        assert np.array_equal(st.bank[s], (probs[i] > 0.5).astype(np.uint8))
    assert st.model.training


def test_schedule_plateau_and_patience(fast_cfg, small_manifest):
    tr = Trainer(_cfg(fast_cfg, plateau_patience=2, patience=4, max_epochs=50), small_manifest)
    st = tr.init_state()
    lr0 = st.lr
    assert tr.step_schedule(st, 0.5)
    assert not tr.step_schedule(st, 0.5)
    assert st.lr == lr0
    assert not tr.step_schedule(st, 0.4)
    assert st.lr == pytest.approx(lr0 * 0.1)
    assert all(g["lr"] == st.lr for g in st.optimizer.param_groups)
    assert not tr.should_stop(st)
    tr.step_schedule(st, 0.4)
    tr.step_schedule(st, 0.4)
    assert st.lr == pytest.approx(lr0 * 0.01)
    assert tr.should_stop(st)
    assert tr.step_schedule(st, 0.6) and st.epochs_since_improve == 0


def test_early_stop_at_patience_plus_one(fast_cfg, small_manifest, tmp_path, monkeypatch):
    cfg = _cfg(fast_cfg, patience=2, max_epochs=10)
    row = MetricRow("__mean__", 0.3, 0.2, 0.3, 0.3, 0.3, 5.0)
    fake = type("R", (), {"summary": row, "count_accuracy": 0.5})()
    monkeypatch.setattr(Trainer, "validate", lambda self, st: fake)
    st = fit(cfg, small_manifest, tmp_path)
    assert st.epoch == 3
    log = read_train_log(tmp_path / "train_log.csv")
    assert [r["epoch"] for r in log] == [1, 2, 3]
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()
    assert load_checkpoint(tmp_path / "best.ckpt").epoch == 1


def test_resume_matches_uninterrupted(fast_cfg, small_manifest, tmp_path):
    cfg = _cfg(fast_cfg, max_epochs=3)
    full = fit(cfg, small_manifest, tmp_path / "full")
    fit(cfg, small_manifest, tmp_path / "cut", stop_after=1)
    resumed = fit(cfg, small_manifest, tmp_path / "cut", resume=tmp_path / "cut" / "last.ckpt")
    assert full.history == resumed.history
    assert _same(full.model.state_dict(), resumed.model.state_dict())
    assert full.bank.equals(resumed.bank)
    assert (tmp_path / "full" / "train_log.csv").read_text() == (tmp_path / "cut" / "train_log.csv").read_text()


def test_resume_rejects_changed_config(fast_cfg, small_manifest, tmp_path):
    fit(fast_cfg, small_manifest, tmp_path, stop_after=1)
    longer = _cfg(fast_cfg, max_epochs=5)
    assert load_checkpoint(tmp_path / "last.ckpt", cfg=longer).model.cfg.max_epochs == 5
    with pytest.raises(ValueError, match="differs"):
        load_checkpoint(tmp_path / "last.ckpt", cfg=_cfg(fast_cfg, learning_rate=0.5))


def test_log_columns(fast_cfg, small_manifest, tmp_path):
    fit(_cfg(fast_cfg, max_epochs=1), small_manifest, tmp_path)
    header = (tmp_path / "train_log.csv").read_text().splitlines()[0]
    assert tuple(header.split(",")) == LOG_COLUMNS


def test_nonfinite_loss_raises(fast_cfg, small_manifest):
    tr = Trainer(fast_cfg, small_manifest)
    st = tr.init_state()
    with torch.no_grad():
        next(st.model.decoder.parameters()).fill_(float("nan"))
    with pytest.raises(NumericError, match="non-finite loss"):
        tr.train_epoch(st)


class _Echo(torch.nn.Module):
    """Returns the feedback mask itself: every mask is a fixed point."""

    def forward(self, image, mask, attrs=None):
        return {"pred": mask * 0.8 + 0.1, "logits": torch.zeros(len(image), 4)}


def test_refine_fixed_point():
    imgs = np.random.default_rng(0).random((3, 32, 32, 3)).astype(np.float32)
    _, hist, _ = refine(_Echo(), imgs, 3)
    assert all(np.array_equal(h, hist[0]) for h in hist)


def test_refine_stays_fixed_once_repeated(fast_cfg, small_manifest):
    tr = Trainer(fast_cfg, small_manifest)
    model = tr.init_state().model
    imgs = np.stack([tr.images[s] for s in tr.val_stems])
    _, hist, _ = refine(model, imgs, 4)
    assert len(hist) == 5
    for i in range(len(imgs)):
        seq = [h[i] for h in hist]
        for t in range(1, len(seq)):
            if np.array_equal(seq[t], seq[t - 1]):
                assert all(np.array_equal(seq[t], x) for x in seq[t:])
    with pytest.raises(ValueError):
        refine(model, imgs, 0)


def test_infer_one_contract(fast_cfg, small_manifest):
    tr = Trainer(fast_cfg, small_manifest)
    model = tr.init_state().model
    prob, mask, attrs, prompt = infer_one(model, tr.images[tr.val_stems[0]])
    assert prob.shape == mask.shape == (64, 64)
    assert ((prob > 0) & (prob < 1)).all()
    assert np.array_equal(mask, (prob > 0.5).astype(np.uint8))
    assert prompt.startswith("a colorectal image with")
    assert dataclasses.is_dataclass(attrs)


@pytest.mark.slow
def test_training_loss_trends_down(fast_cfg, small_manifest):
    tr = Trainer(fast_cfg, small_manifest)
    st = tr.init_state()
    losses = [tr.train_epoch(st).total for _ in range(6)]
    drops = sum(b < a for a, b in zip(losses, losses[1:]))
    assert drops >= 3, losses
    assert losses[-1] < losses[0]
