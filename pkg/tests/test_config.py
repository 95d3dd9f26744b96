import os

import pytest

from facemark.config import ENV_CONFIG, config_hash, load_run_config
from facemark.errors import ConfigError

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def test_defaults_build_the_full_scale_model():
    rc = load_run_config()
    assert rc.model.num_landmarks == 68
    assert rc.model.dim == 256
    assert rc.model.num_layers == 3
    assert rc.train.steps == 2000
    assert rc.data_count == 8
    assert rc.eval_normalizer == "image_size"
    assert rc.face_spec.num_landmarks == rc.model.num_landmarks
    assert rc.face_spec.image_side == rc.model.image_side
    assert len(rc.hash) == 12


def test_file_values_override_defaults(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "[model]\nnum_landmarks = 5\ndim = 16\nheads = 2\nlevels = 2\n"
        "points = 2\nnum_layers = 2\nimage_side = 32\nstage_channels = 8,16\n"
        "[train]\nlr = 0.001\n"
    )
    rc = load_run_config(str(cfg))
    assert rc.model.num_landmarks == 5
    assert rc.model.stage_channels == (8, 16)
    assert rc.train.lr == 0.001
    # untouched keys keep their defaults
    assert rc.train.batch_size == 8


def test_set_overrides_beat_the_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("[train]\nlr = 0.001\n")
    rc = load_run_config(str(cfg), overrides=("train.lr=0.5", "data.count=3"))
    assert rc.train.lr == 0.5
    assert rc.data_count == 3


def test_augment_keys_reach_train_config(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("[train]\ntranslate = yes\nmax_shift = 2\nblur = on\n")
    rc = load_run_config(str(cfg))
    assert rc.train.augment.translate
    assert rc.train.augment.max_shift == 2
    assert rc.train.augment.blur
    assert not rc.train.augment.flip


def test_unknown_key_lists_choices(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("[train]\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="lr"):
        load_run_config(str(cfg))


def test_unknown_section_rejected(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("[serving]\nport = 80\n")
    with pytest.raises(ConfigError, match="valid sections"):
        load_run_config(str(cfg))


def test_bad_value_and_bad_override_shape():
    with pytest.raises(ConfigError, match="bad value"):
        load_run_config(overrides=("model.dim=huge",))
    with pytest.raises(ConfigError, match="section.key=value"):
        load_run_config(overrides=("dim=16",))


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ConfigError, match="config not found"):
        load_run_config(str(tmp_path / "gone.cfg"))


def test_unknown_normalizer_rejected():
    with pytest.raises(ConfigError, match="normalizer"):
        load_run_config(overrides=("eval.normalizer=feet",))


def test_env_var_supplies_the_config(tmp_path, monkeypatch):
    cfg = tmp_path / "env.cfg"
    cfg.write_text("[data]\ncount = 4\n")
    monkeypatch.setenv(ENV_CONFIG, str(cfg))
    assert load_run_config().data_count == 4
    # an explicit path still wins over the environment
    other = tmp_path / "other.cfg"
    other.write_text("[data]\ncount = 6\n")
    assert load_run_config(str(other)).data_count == 6


def test_hash_tracks_content_not_origin(tmp_path):
    base = load_run_config()
    cfg = tmp_path / "run.cfg"
    cfg.write_text("[data]\ncount = 8\n")  # same value as the default
    assert load_run_config(str(cfg)).hash == base.hash
    changed = load_run_config(overrides=("data.count=9",))
    assert changed.hash != base.hash
    assert config_hash(changed.values) == changed.hash


def test_repo_configs_parse():
    tiny = load_run_config(os.path.join(REPO, "configs", "tiny.cfg"))
    assert tiny.model.dim == 16
    big = load_run_config(os.path.join(REPO, "configs", "default.cfg"))
    assert big.model.dim == 256
