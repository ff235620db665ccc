import numpy as np
import pytest

from fadct.checkpoint import FormatError, load_checkpoint, save_checkpoint
from fadct.config import ConfigError, RunConfig, config_keys, parse_config, serialize_config
from fadct.rng import Rng


def _tensors():
    rng = Rng(0)
    return {
        "a.w": rng.normals((3, 4)),
        "a.b": rng.normals(4),
        "scalar": np.asarray(rng.normal()),
        "deep.layer.0.gamma": rng.normals((2, 2, 2)),
    }


def test_roundtrip_is_bit_exact(tmp_path):
    path = tmp_path / "m.fadc"
    tensors = _tensors()
    save_checkpoint(path, tensors, "cfg text\n")
    cfg_text, loaded = load_checkpoint(path)
    assert cfg_text == "cfg text\n"
    assert set(loaded) == set(tensors)
    for name, arr in tensors.items():
        assert loaded[name].shape == arr.shape
        assert np.array_equal(loaded[name], arr)
        assert loaded[name].dtype == np.float64


def test_save_load_is_stable_on_disk(tmp_path):
    p1, p2 = tmp_path / "a.fadc", tmp_path / "b.fadc"
    save_checkpoint(p1, _tensors(), "x = 1\n")
    save_checkpoint(p2, _tensors(), "x = 1\n")
    assert p1.read_bytes() == p2.read_bytes()


def test_float32_checkpoint_loads_with_reduced_precision(tmp_path):
    path = tmp_path / "m32.fadc"
    tensors = _tensors()
    save_checkpoint(path, tensors, "", dtype="f32")
    _, loaded = load_checkpoint(path)
    for name, arr in tensors.items():
        assert np.array_equal(loaded[name], arr.astype(np.float32).astype(np.float64))


def test_bad_magic_reports_offset(tmp_path):
    path = tmp_path / "bad.fadc"
    path.write_bytes(b"NOPE" + bytes(64))
    with pytest.raises(FormatError) as err:
        load_checkpoint(path)
    assert "offset 0" in str(err.value)


def test_truncated_file_reports_offset(tmp_path):
    path = tmp_path / "trunc.fadc"
    save_checkpoint(path, _tensors(), "snapshot")
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) - 7])
    with pytest.raises(FormatError) as err:
        load_checkpoint(path)
    assert "offset" in str(err.value)


def test_version_mismatch_names_both_versions(tmp_path):
    path = tmp_path / "v.fadc"
    save_checkpoint(path, {}, "")
    blob = bytearray(path.read_bytes())
    blob[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError) as err:
        load_checkpoint(path)
    assert "99" in str(err.value) and "1" in str(err.value)


def test_trailing_garbage_rejected(tmp_path):
    path = tmp_path / "g.fadc"
    save_checkpoint(path, {}, "")
    path.write_bytes(path.read_bytes() + b"junk")
    with pytest.raises(FormatError):
        load_checkpoint(path)


# -- config schema -----------------------------------------------------------


def test_config_roundtrip_through_text():
    cfg = RunConfig(variant="dctvit", seed=11, num_classes=5,
                    resnet_channels=(4, 8), kl_scale=12.5, hflip_prob=0.25)
    text = serialize_config(cfg)
    back = parse_config(text)
    assert back == cfg


def test_config_unknown_key_is_hard_error():
    with pytest.raises(ConfigError) as err:
        parse_config("batchsize = 8\n")
    assert "batchsize" in str(err.value)


def test_config_bad_values_rejected():
    with pytest.raises(ConfigError):
        parse_config("loss_alpha = 1.5\n")
    with pytest.raises(ConfigError):
        parse_config("variant = alexnet\n")
    with pytest.raises(ConfigError):
        parse_config("shared_vit_backbone = yes\n")
    with pytest.raises(ConfigError):
        parse_config("image_size = 33\n")  # not divisible by patch_size
    with pytest.raises(ConfigError):
        parse_config("hflip_prob = 2.0\n")
    with pytest.raises(ConfigError):
        parse_config("kl_scale = sometimes\n")


def test_config_overrides_and_comments():
    text = "# comment line\nseed = 5  # trailing comment\n\nepochs = 3\n"
    cfg = parse_config(text, overrides=["seed=9", "variant=vit"])
    assert cfg.seed == 9
    assert cfg.epochs == 3
    assert cfg.variant == "vit"


def test_config_kl_scale_auto_resolution():
    cfg = parse_config("kl_scale = auto\n")
    assert cfg.resolve_kl_scale(120) == 120.0
    cfg = parse_config("kl_scale = 7.5\n")
    assert cfg.resolve_kl_scale(120) == 7.5


def test_config_key_inventory_is_stable():
    keys = config_keys()
    assert len(keys) == len(set(keys))
    for required in ("variant", "seed", "mask_sharpness", "loss_alpha",
                     "kl_scale", "epochs", "lr_backbone", "lr_head",
                     "train_dir", "checkpoint_dtype", "workers"):
        assert required in keys
