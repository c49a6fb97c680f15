"""RunConfig: validation, mode-dependent loss weights, serialization,
config hashing."""

import json

import pytest

from tubeseg.config import RunConfig


def test_defaults_are_valid():
    cfg = RunConfig()
    assert cfg.subclip_size == 2
    assert cfg.window == 6
    assert cfg.num_queries == 16


def test_vss_mode_zeroes_tracking_weights():
    cfg = RunConfig(mode="VSS")
    w = cfg.loss_weights()
    assert w.lambda_track == 0.0 and w.lambda_aux == 0.0
    w = RunConfig(mode="VPS").loss_weights()
    assert w.lambda_track == 1.0


def test_unknown_keys_rejected():
    with pytest.raises(ValueError, match="unknown config keys"):
        RunConfig.from_dict({"learning_rte": 0.1})


def test_bad_values_rejected():
    with pytest.raises(ValueError):
        RunConfig(mode="NOPE")
    with pytest.raises(ValueError):
        RunConfig(window=0)
    with pytest.raises(ValueError):
        RunConfig(learning_rate=-1.0)
    with pytest.raises(ValueError):
        RunConfig(alpha_pos=0.2, alpha_neg=0.5)


def test_round_trip_and_hash_stability(tmp_path):
    cfg = RunConfig(seed=7, window=4)
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    loaded = RunConfig.from_file(path)
    assert loaded == cfg
    assert loaded.config_hash() == cfg.config_hash()
    assert RunConfig(seed=8).config_hash() != cfg.config_hash()


def test_replace():
    cfg = RunConfig().replace(window=3, seed=9)
    assert cfg.window == 3 and cfg.seed == 9


def test_views_mirror_fields():
    cfg = RunConfig(score_thresh=0.4, max_age=3, alpha_pos=0.8)
    icfg = cfg.inference_config()
    assert icfg.score_thresh == 0.4 and icfg.max_age == 3
    assert cfg.inference_config(window=2).window == 2
    assert cfg.assign_config().alpha_pos == 0.8
    assert cfg.model_config(4).num_classes == 4
