"""
Presets Module
Named configuration overlays, synthetic scene specs and host-aware worker selection
"""

import copy
import logging
from typing import Any, Dict

import psutil

from modules.errors import ConfigError

logger = logging.getLogger(__name__)

# Training presets, merged over the file configuration
PRESETS: Dict[str, Dict[str, Any]] = {
    # reference constants at full scale
    'reference': {
        'train': {
            'iterations': 30000,
            'epsilon': 0.001,
            'n_appearance': 32,
            'loss': {'ssim': 0.2, 'vol': 0.01, 'hf': 0.01},
            'refine': {'epsilon_g': 0.001, 'tau_g': 0.0002, 'window': 100},
        },
    },
    # desk-scale 64x64 scenes
    'smoke': {
        'train': {
            'iterations': 2000,
            'epsilon': 0.05,
            'refine_start': 200,
            'refine_end': 1500,
            'log_every': 100,
            'fpr': {'active_window': [300, 1500]},
            'refine': {'epsilon_g': 0.05, 'window': 100},
        },
    },
    'mono-replica': {
        'train': {'n_appearance': 1},
        'data': {'similarity_alignment': True},
    },
    'hf-strong': {
        'train': {'loss': {'hf': 0.025}},
    },
    # single-scale frequency regularisation
    'sfr': {
        'train': {'fpr': {'scales': [1.0], 'weights': [1.0]}},
    },
}

# Bundle adjustment demo instances
BA_PRESETS: Dict[str, Dict[str, Any]] = {
    'noiseless': {
        'instance': {'n_keyframes': 3, 'n_points': 50, 'noise': 0.0, 'outlier_fraction': 0.0},
        'perturb': {'rotation_deg': 5.0, 'translation': 0.1},
    },
    'noisy': {
        'instance': {'n_keyframes': 5, 'n_points': 100, 'noise': 1.0, 'outlier_fraction': 0.0},
        'perturb': {'rotation_deg': 2.0, 'translation': 0.05},
    },
    'outliers': {
        'instance': {'n_keyframes': 3, 'n_points': 50, 'noise': 0.5, 'outlier_fraction': 0.2},
        'perturb': {'rotation_deg': 5.0, 'translation': 0.1},
    },
}

# Synthetic scene specs in the same shape as a --spec JSON file
SMOKE_SCENE: Dict[str, Any] = {
    'n_blobs': 20,
    'ring': {'count': 10, 'radius': 1.2, 'height': 0.3},
    'width': 64,
    'height': 64,
    'focal': 64.0,
    'noise': {'points_per_blob': 150},
    'keyframes': [0, 1, 2, 3, 5, 6, 7, 8],
}

APPEARANCE_SCENE: Dict[str, Any] = dict(SMOKE_SCENE, appearance={'amplitude': 0.2})

TINY_SCENE: Dict[str, Any] = {
    'blobs': [{'center': [0.0, 0.0, 0.0], 'sigma': [0.12, 0.1, 0.08],
               'color': [0.8, 0.3, 0.2], 'opacity': 0.9}],
    'ring': {'count': 4, 'radius': 1.0, 'height': 0.2},
    'width': 32,
    'height': 32,
    'focal': 32.0,
    'noise': {'points_per_blob': 60},
    'keyframes': [0, 1, 2],
}

# Hosts below these limits get a single rasterizer worker
LOW_RESOURCE_REQUIREMENTS = {
    'min_ram': 4,  # GB
    'min_cpu_cores': 2,
    'cpu_usage_threshold': 80,  # %
}


def get_preset(name: str) -> Dict[str, Any]:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset '{name}' (choose from {', '.join(sorted(PRESETS))})")
    return copy.deepcopy(PRESETS[name])


def get_ba_preset(name: str) -> Dict[str, Any]:
    if name not in BA_PRESETS:
        raise ConfigError("preset", f"unknown BA preset '{name}' (choose from {', '.join(sorted(BA_PRESETS))})")
    return copy.deepcopy(BA_PRESETS[name])


def should_enable_low_resource_mode() -> bool:
    """Check if the host is too small for parallel rasterization"""
    try:
        memory_gb = psutil.virtual_memory().total / (1024 ** 3)
        cpu_count = psutil.cpu_count() or 1
        cpu_usage = psutil.cpu_percent(interval=0.1)
        return (memory_gb < LOW_RESOURCE_REQUIREMENTS['min_ram'] or
                cpu_count < LOW_RESOURCE_REQUIREMENTS['min_cpu_cores'] or
                cpu_usage > LOW_RESOURCE_REQUIREMENTS['cpu_usage_threshold'])
    except psutil.Error:
        # Default to low resource mode if detection fails
        return True


def recommended_workers(limit: int = 8) -> int:
    if should_enable_low_resource_mode():
        return 1
    return max(1, min(limit, (psutil.cpu_count(logical=False) or 1)))
