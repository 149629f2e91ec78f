"""Tests for the layered settings tree and presets"""

import json

import pytest

from modules.config_manager import ConfigManager, deep_merge
from modules.errors import ConfigError
from modules.presets import PRESETS, get_ba_preset, get_preset, recommended_workers
from modules.rasterizer import RasterConfig
from modules.trainer import TrainConfig


def write_json(path, data):
    path.write_text(json.dumps(data))
    return str(path)


def test_defaults_match_dataclasses():
    manager = ConfigManager()
    assert manager.get_train_config() == TrainConfig()
    assert manager.get_raster_config() == RasterConfig()
    assert manager.get_setting("train.loss.ssim") == 0.2
    assert manager.get_setting("train.nothing", "fallback") == "fallback"
    assert manager.get_robust_config().huber_delta == pytest.approx(2.447651936039926)


def test_robust_section_and_data_keys_from_file(tmp_path):
    path = write_json(tmp_path / "ba.json", {'ba': {'sigma_base': 2.0, 'huber_delta': None},
                                             'data': {'similarity_alignment': True}})
    manager = ConfigManager(path)
    robust = manager.get_robust_config()
    assert robust.sigma_base == 2.0 and robust.huber_delta is None
    assert manager.get_setting("data.similarity_alignment") is True
    for stale in ("data.workers", "advanced.debug_mode"):
        with pytest.raises(ConfigError):
            manager.set_setting(stale, 1)


def test_deep_merge_keeps_siblings():
    base = {'a': {'b': 1, 'c': 2}, 'd': 3}
    merged = deep_merge(base, {'a': {'b': 5}})
    assert merged == {'a': {'b': 5, 'c': 2}, 'd': 3}
    assert base['a']['b'] == 1


def test_set_setting_rejects_unknown_keys():
    manager = ConfigManager()
    manager.set_setting("train.iterations", 7)
    assert manager.get_train_config().iterations == 7
    with pytest.raises(ConfigError) as info:
        manager.set_setting("train.itterations", 7)
    assert info.value.key_path == "train.itterations"


def test_precedence_file_then_preset_then_overrides(tmp_path):
    path = write_json(tmp_path / "c.json", {'train': {'iterations': 50, 'hidden': 16}})
    manager = ConfigManager(path)
    assert manager.get_setting("train.iterations") == 50
    manager.apply_preset("smoke")
    assert manager.get_setting("train.iterations") == 2000
    assert manager.get_setting("train.hidden") == 16
    manager.apply_overrides({'train.iterations': 10, 'raster.workers': 2})
    cfg = manager.get_train_config()
    assert cfg.iterations == 10
    assert cfg.fpr.active_window == (300, 1500)
    assert manager.get_raster_config().workers == 2


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="file not found"):
        ConfigManager(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "train": {\n    "iterations": ,\n  }\n}')
    with pytest.raises(ConfigError, match=":3:"):
        ConfigManager(str(bad))
    with pytest.raises(ConfigError) as info:
        ConfigManager(write_json(tmp_path / "u.json", {'train': {'loss': {'ssim_weight': 1}}}))
    assert info.value.key_path == "train.loss.ssim_weight"
    with pytest.raises(ConfigError):
        ConfigManager(write_json(tmp_path / "l.json", [1, 2]))
    with pytest.raises(ConfigError, match="expected an object"):
        ConfigManager(write_json(tmp_path / "o.json", {'train': 3}))


def test_value_errors_surface_on_typed_access(tmp_path):
    manager = ConfigManager(write_json(tmp_path / "c.json", {'train': {'refine': {'window': 0}}}))
    with pytest.raises(ConfigError) as info:
        manager.get_train_config()
    assert info.value.key_path == "train.refine.window"
    manager = ConfigManager(write_json(tmp_path / "r.json", {'raster': {'tile_size': 0}}))
    with pytest.raises(ConfigError, match="raster.tile_size"):
        manager.get_raster_config()


def test_log_level_validation():
    manager = ConfigManager()
    assert manager.get_advanced_config()['log_level'] == "INFO"
    manager.set_setting("advanced.log_level", "verbose")
    with pytest.raises(ConfigError) as info:
        manager.get_advanced_config()
    assert info.value.key_path == "advanced.log_level"


def test_export_and_import(tmp_path):
    manager = ConfigManager()
    manager.apply_preset("hf-strong")
    assert manager.export_config(str(tmp_path / "out.json"))
    other = ConfigManager()
    assert other.import_config(str(tmp_path / "out.json"))
    assert other.get_train_config().loss.hf == 0.025
    assert not other.import_config(str(tmp_path / "absent.json"))


def test_save_settings_writes_file(tmp_path):
    path = write_json(tmp_path / "c.json", {})
    manager = ConfigManager(path)
    assert manager.save_settings({'train': {'seed': 4}})
    assert json.loads((tmp_path / "c.json").read_text())['train']['seed'] == 4
    assert ConfigManager(path).get_train_config().seed == 4


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_every_preset_builds_valid_configs(name):
    manager = ConfigManager()
    manager.apply_preset(name)
    manager.get_train_config()
    manager.get_raster_config()


def test_unknown_presets():
    with pytest.raises(ConfigError, match="unknown preset"):
        get_preset("ultra")
    with pytest.raises(ConfigError):
        get_ba_preset("ultra")
    preset = get_preset("reference")
    preset['train']['iterations'] = 1
    assert get_preset("reference")['train']['iterations'] == 30000


def test_recommended_workers_is_bounded():
    assert 1 <= recommended_workers(limit=2) <= 2


def test_config_summary():
    summary = ConfigManager().get_config_summary()
    assert summary['appearance_mode'] == "afme"
    assert summary['fpr_window'] == [3000, 15000]
