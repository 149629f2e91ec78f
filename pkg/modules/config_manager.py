"""
Configuration Manager Module
Versioned JSON settings tree for training, rasterization, bundle adjustment and data
"""

import copy
import json
import logging
import os
import threading
import time
from dataclasses import asdict
from typing import Any, Dict, Optional

from modules.errors import ConfigError
from modules.geometry import RobustConfig
from modules.presets import get_preset
from modules.rasterizer import RasterConfig
from modules.trainer import TrainConfig, build_dataclass

logger = logging.getLogger(__name__)

CONFIG_VERSION = "1.0.0"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def deep_merge(base: Dict[str, Any], overlay: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


class ConfigManager:
    """Settings precedence: defaults < config file < preset < explicit overrides"""

    def __init__(self, config_file: Optional[str] = None):
        self.config_file = config_file
        self.config: Dict[str, Any] = {}
        self.lock = threading.Lock()
        self.load_settings()

    def load_settings(self) -> Dict[str, Any]:
        """Load defaults merged with the configuration file, if any"""
        self.config = self._get_default_config()
        if self.config_file is None:
            return self.config
        if not os.path.exists(self.config_file):
            raise ConfigError("config", f"file not found: {self.config_file}")
        try:
            with open(self.config_file, 'r') as f:
                loaded = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"{self.config_file}:{e.lineno}: {e.msg}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config", "top level must be an object")
        self._validate_config(loaded)
        self.config = deep_merge(self.config, loaded)
        return self.config

    def save_settings(self, settings: Dict[str, Any] = None, path: Optional[str] = None) -> bool:
        """Merge settings and write the tree to disk"""
        target = path or self.config_file
        with self.lock:
            if settings:
                self._validate_config(settings)
                self.config = deep_merge(self.config, settings)
            self.config['last_updated'] = time.time()
            if target is None:
                return True
            try:
                with open(target, 'w') as f:
                    json.dump(self.config, f, indent=2)
                return True
            except OSError as e:
                logger.error(f"Failed to save settings: {e}")
                return False

    def get_setting(self, key: str, default: Any = None) -> Any:
        """Dotted-path lookup, e.g. 'train.loss.ssim'"""
        node = self.config
        for part in key.split('.'):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def set_setting(self, key: str, value: Any) -> None:
        parts = key.split('.')
        with self.lock:
            defaults = self._get_default_config()
            for part in parts[:-1]:
                defaults = defaults.get(part) if isinstance(defaults, dict) else None
            if not isinstance(defaults, dict) or parts[-1] not in defaults:
                raise ConfigError(key, "unknown key")
            node = self.config
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = value

    def apply_preset(self, name: str) -> None:
        preset = get_preset(name)
        self._validate_config(preset)
        with self.lock:
            self.config = deep_merge(self.config, preset)
        logger.info(f"Applied preset '{name}'")

    def apply_overrides(self, overrides: Dict[str, Any]) -> None:
        """Dotted keys to values, highest precedence"""
        for key, value in overrides.items():
            self.set_setting(key, value)

    def _get_default_config(self) -> Dict[str, Any]:
        robust = asdict(RobustConfig())
        return {
            "version": CONFIG_VERSION,
            "last_updated": time.time(),
            "train": TrainConfig().to_dict(),
            "raster": asdict(RasterConfig()),
            "ba": robust,
            "data": {
                "keyframe_every": None,
                "similarity_alignment": False,
            },
            "advanced": {
                "log_level": "INFO",
                "progress": True,
            },
        }

    def _validate_config(self, config: Dict[str, Any], defaults: Dict[str, Any] = None, path: str = "") -> None:
        """Reject keys that do not exist in the default tree"""
        defaults = self._get_default_config() if defaults is None else defaults
        for key, value in config.items():
            key_path = f"{path}.{key}" if path else key
            if key not in defaults:
                raise ConfigError(key_path, "unknown key")
            if isinstance(defaults[key], dict):
                if not isinstance(value, dict):
                    raise ConfigError(key_path, "expected an object")
                self._validate_config(value, defaults[key], key_path)

    def get_train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.get_setting("train", {}))

    def get_raster_config(self) -> RasterConfig:
        return build_dataclass(RasterConfig, self.get_setting("raster", {}), "raster")

    def get_robust_config(self) -> RobustConfig:
        return build_dataclass(RobustConfig, self.get_setting("ba", {}), "ba")

    def get_advanced_config(self) -> Dict[str, Any]:
        advanced = self.get_setting("advanced", {})
        if advanced.get("log_level", "INFO").upper() not in LOG_LEVELS:
            raise ConfigError("advanced.log_level", f"must be one of {', '.join(LOG_LEVELS)}")
        return advanced

    def reset_to_defaults(self) -> bool:
        """Reset all settings to defaults"""
        self.config = self._get_default_config()
        return self.save_settings()

    def export_config(self, file_path: str) -> bool:
        """Export configuration to a file"""
        try:
            with open(file_path, 'w') as f:
                json.dump(self.config, f, indent=2)
            return True
        except OSError as e:
            logger.error(f"Failed to export configuration: {e}")
            return False

    def import_config(self, file_path: str) -> bool:
        """Replace the current tree with a validated file"""
        try:
            with open(file_path, 'r') as f:
                imported = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.error(f"Failed to import configuration: {e}")
            return False
        self._validate_config(imported)
        self.config = deep_merge(self._get_default_config(), imported)
        return self.save_settings()

    def get_config_summary(self) -> Dict[str, Any]:
        return {
            "version": self.get_setting("version", CONFIG_VERSION),
            "last_updated": self.get_setting("last_updated"),
            "iterations": self.get_setting("train.iterations"),
            "appearance_mode": self.get_setting("train.appearance_mode"),
            "fpr_window": self.get_setting("train.fpr.active_window"),
            "workers": self.get_setting("raster.workers"),
        }
