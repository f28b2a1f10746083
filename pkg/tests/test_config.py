"""Config layering and whole-list validation."""
import pytest
import yaml

from modgate.config import RunConfig, load_config
from modgate.errors import ConfigError


def test_defaults_are_valid():
    cfg = load_config(env={})
    assert cfg == RunConfig()
    cfg.validate()


def test_file_overrides_defaults(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({"workers": 4, "t_block": 0.8,
                                    "categories": ["a", "b"]}))
    cfg = load_config(path, env={})
    assert cfg.workers == 4
    assert cfg.t_block == 0.8
    assert cfg.categories == ("a", "b")
    assert cfg.seed == 0  # untouched default


def test_env_beats_file(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({"workers": 4}))
    cfg = load_config(path, env={"MODGATE_WORKERS": "8", "MODGATE_SEED": "3"})
    assert cfg.workers == 8
    assert cfg.seed == 3


def test_flags_beat_env(tmp_path):
    cfg = load_config(env={"MODGATE_WORKERS": "8"}, overrides={"workers": 2})
    assert cfg.workers == 2


def test_none_overrides_are_skipped():
    cfg = load_config(env={}, overrides={"workers": None, "seed": 5})
    assert cfg.workers == 1
    assert cfg.seed == 5


def test_unknown_file_key_rejected(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({"wrokers": 4}))
    with pytest.raises(ConfigError) as err:
        load_config(path, env={})
    assert "wrokers" in str(err.value)


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml", env={})


def test_non_mapping_file_rejected(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("- a\n- b\n")
    with pytest.raises(ConfigError):
        load_config(path, env={})


def test_bad_env_type_rejected():
    with pytest.raises(ConfigError) as err:
        load_config(env={"MODGATE_WORKERS": "plenty"})
    assert "integer" in str(err.value)


def test_all_violations_enumerated():
    with pytest.raises(ConfigError) as err:
        load_config(env={}, overrides={"workers": 0, "t_review": 1.5,
                                       "bind": "nope", "n_per_class": 0})
    v = err.value.violations
    assert len(v) >= 4
    text = "; ".join(v)
    assert "workers" in text and "thresholds" in text
    assert "bind" in text and "n_per_class" in text


def test_review_above_block_rejected():
    with pytest.raises(ConfigError) as err:
        load_config(env={}, overrides={"t_review": 0.95, "t_block": 0.9})
    assert "t_review" in str(err.value)


def test_routing_rest_must_be_empty():
    with pytest.raises(ConfigError) as err:
        load_config(env={}, overrides={"routing": {"rest": ["skin"]},
                                       "detectors": {"skin": {"kind": "skin"}}})
    assert "rest" in str(err.value)


def test_routing_unknown_detector_rejected():
    with pytest.raises(ConfigError) as err:
        load_config(env={}, overrides={"routing": {"apparel": ["ghost"]}})
    assert "ghost" in str(err.value)


def test_bind_parsing():
    cfg = load_config(env={}, overrides={"bind": "0.0.0.0:9001"})
    assert cfg.host == "0.0.0.0"
    assert cfg.port == 9001
    for bad in ("localhost", ":0", "h:99999", "h:port"):
        with pytest.raises(ConfigError):
            load_config(env={}, overrides={"bind": bad})


def test_env_tuple_coercion():
    cfg = load_config(env={"MODGATE_CATEGORIES": "[x, y, z]",
                           "MODGATE_SCALE_CHOICES": "[0.5, 0.25]"})
    assert cfg.categories == ("x", "y", "z")
    assert cfg.scale_choices == (0.5, 0.25)


def test_to_dict_round_trips_through_yaml(tmp_path):
    cfg = load_config(env={}, overrides={"workers": 3})
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict()))
    again = load_config(path, env={})
    assert again == cfg
