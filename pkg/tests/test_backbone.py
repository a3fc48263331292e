import pytest
import torch

from polypfeedback.backbone import (EncoderSpec, WeightsMismatch, build_encoder, load_pretrained, pyramid_shapes,
                                    save_weights)

from helpers import analytic_grad, central_diff, rel_err

SMALL = dict(channels=(8, 16, 24, 32), depths=(1, 1, 1, 1), heads=(1, 2, 2, 4))


@pytest.mark.parametrize("variant", ["tiny-conv", "pyramid-transformer"])
@pytest.mark.parametrize("size", [64, 128])
def test_pyramid_shapes(variant, size):
    spec = EncoderSpec(variant=variant, **SMALL)
    enc = build_encoder(spec).eval()
    feats = enc(torch.rand(2, 3, size, size))
    assert [tuple(f.shape[1:]) for f in feats] == pyramid_shapes(size, spec.channels)
    assert all(torch.isfinite(f).all() for f in feats)
    again = enc(torch.rand(2, 3, size, size))
    assert len(again) == 4


def test_default_pvt_shapes_at_256():
    enc = build_encoder(EncoderSpec(depths=(1, 1, 1, 1))).eval()
    with torch.no_grad():
        feats = enc(torch.rand(2, 3, 256, 256))
    assert [tuple(f.shape) for f in feats] == [(2, 64, 64, 64), (2, 128, 32, 32), (2, 320, 16, 16), (2, 512, 8, 8)]


@pytest.mark.parametrize("variant", ["tiny-conv", "pyramid-transformer"])
def test_deterministic(variant):
    enc = build_encoder(EncoderSpec(variant=variant, **SMALL)).eval()
    x = torch.rand(1, 3, 64, 64)
    a, b = enc(x), enc(x)
    assert all(torch.equal(u, v) for u, v in zip(a, b))


def test_attention_rows_sum_to_one():
    enc = build_encoder(EncoderSpec(variant="pyramid-transformer", **SMALL)).eval()
    attns = [m for m in enc.modules() if m.__class__.__name__ == "SRAttention"]
    for a in attns:
        a.keep_attn = True
    enc(torch.rand(2, 3, 64, 64))
    for a in attns:
        rows = a.last_attn.sum(-1)
        assert torch.allclose(rows, torch.ones_like(rows), atol=1e-6)


def test_patch_embedding_gradient():
    enc = build_encoder(EncoderSpec(variant="pyramid-transformer", **SMALL)).double().eval()
    x = torch.rand(1, 3, 64, 64, dtype=torch.float64)
    w = enc.stages[0].embed.proj.weight
    probe = [torch.randn(1, *shape, dtype=torch.float64) for shape in pyramid_shapes(64, SMALL["channels"])]
    fn = lambda: sum((f * r).sum() for f, r in zip(enc(x), probe))  # noqa: E731
    idx = list(range(0, w.numel(), 37))
    assert rel_err(analytic_grad(fn, w, idx), central_diff(fn, w, idx)) <= 1e-3


def test_weights_round_trip(tmp_path):
    spec = EncoderSpec(variant="pyramid-transformer", **SMALL)
    enc = build_encoder(spec).eval()
    save_weights(enc, tmp_path / "w.pt", spec)
    torch.manual_seed(99)
    other = build_encoder(spec).eval()
    report = load_pretrained(other, tmp_path / "w.pt")
    assert report.ok
    x = torch.rand(1, 3, 64, 64)
    assert all(torch.equal(a, b) for a, b in zip(enc(x), other(x)))
    assert any(k.startswith("stages.0.blocks.0.attn") for k in enc.state_dict())


def test_missing_stage_reported(tmp_path):
    spec = EncoderSpec(variant="tiny-conv", **SMALL)
    enc = build_encoder(spec)
    save_weights(enc, tmp_path / "w.pt")
    payload = torch.load(tmp_path / "w.pt", weights_only=True)
    payload["tensors"] = {k: v for k, v in payload["tensors"].items() if not k.startswith("stages.3.")}
    torch.save(payload, tmp_path / "w.pt")
    with pytest.raises(WeightsMismatch, match="missing keys: stages.3"):
        load_pretrained(build_encoder(spec), tmp_path / "w.pt")
    report = load_pretrained(build_encoder(spec), tmp_path / "w.pt", strict=False)
    assert report.missing and all(k.startswith("stages.3.") for k in report.missing)


def test_wrong_channels_named(tmp_path):
    enc = build_encoder(EncoderSpec(variant="tiny-conv", **SMALL))
    save_weights(enc, tmp_path / "w.pt")
    wider = build_encoder(EncoderSpec(variant="tiny-conv", channels=(8, 16, 24, 40), depths=(1, 1, 1, 1)))
    with pytest.raises(WeightsMismatch) as err:
        load_pretrained(wider, tmp_path / "w.pt")
    names = [m[0] for m in err.value.report.mismatched]
    assert "stages.3.0.0.weight" in names
    assert "shape mismatch for stages.3.0.0.weight" in str(err.value)
