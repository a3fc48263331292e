import pytest

from polypfeedback.config import ConfigError, dump_config, load_config, tiny_config, validate_config
from polypfeedback.backbone import pyramid_shapes


def test_defaults():
    cfg = validate_config({})
    assert cfg.image_size == 256
    assert cfg.refine_iterations == 3
    assert cfg.learning_rate == 1e-4
    assert cfg.batch_size == 16
    assert cfg.encoder_channels == (64, 128, 320, 512)


def test_image_size_must_divide_by_32():
    with pytest.raises(ConfigError, match="not divisible by 32"):
        validate_config({"image_size": 100})


def test_threshold_order():
    with pytest.raises(ConfigError, match="threshold order"):
        validate_config({"size_thresholds": [0.2, 0.1]})


@pytest.mark.parametrize("raw", [
    {"batch_size": 0},
    {"learning_rate": 0.0},
    {"refine_iterations": 0},
    {"encoder_channels": [64, 64, 320, 512]},
    {"image_size": -32},
    {"encoder": "resnet"},
])
def test_rejects_invalid(raw):
    with pytest.raises(ConfigError):
        validate_config(raw)


def test_unknown_key_is_an_error():
    with pytest.raises(ConfigError, match="unknown config keys: colour"):
        validate_config({"colour": 1})


def test_file_round_trip(tmp_path):
    cfg = tiny_config(seed=9, size_thresholds=(0.01, 0.3))
    path = tmp_path / "cfg.yaml"
    path.write_text(dump_config(cfg))
    again = load_config(path)
    assert again == cfg
    assert dump_config(again) == dump_config(cfg)
    assert again.digest() == cfg.digest()


def test_nested_file_rejected(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("encoder:\n  depth: 2\n")
    with pytest.raises(ConfigError):
        load_config(path)


@pytest.mark.parametrize("size", [64, 128, 256])
def test_pyramid_arithmetic(size):
    shapes = pyramid_shapes(size, (64, 128, 320, 512))
    assert [s[1] for s in shapes] == [size // 4, size // 8, size // 16, size // 32]
