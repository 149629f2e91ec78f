"""
Resource Monitor Module
Process memory and CPU sampling for training runs
"""

import logging
import time
from datetime import datetime
from typing import Dict, List, Optional

import psutil

logger = logging.getLogger(__name__)


class ResourceMonitor:
    """Samples the current process on demand and keeps the peak RSS"""

    def __init__(self, workers: int = 1, history: int = 1000):
        self.process = psutil.Process()
        self.workers = workers
        self.history = history
        self.samples: List[Dict] = []
        self.peak_rss = 0
        self.started = time.time()
        self.thresholds = {
            'memory_warning': 85,
            'memory_critical': 95,
        }
        # prime cpu_percent so the first real sample is meaningful
        self.process.cpu_percent(interval=None)

    def sample(self) -> Dict:
        try:
            rss = self.process.memory_info().rss
            data = {
                'timestamp': datetime.now().isoformat(),
                'rss_mb': rss / (1024 * 1024),
                'cpu_percent': self.process.cpu_percent(interval=None),
                'system_memory_percent': psutil.virtual_memory().percent,
            }
        except psutil.Error as e:
            logger.debug(f"Resource sample failed: {e}")
            return {'error': str(e)}

        self.peak_rss = max(self.peak_rss, rss)
        self.samples.append(data)
        if len(self.samples) > self.history:
            self.samples.pop(0)
        self._check_alerts(data)
        return data

    def _check_alerts(self, data: Dict) -> Optional[str]:
        usage = data['system_memory_percent']
        if usage >= self.thresholds['memory_critical']:
            logger.warning(f"System memory at {usage:.0f}%; consider fewer workers or a larger voxel size")
            return 'critical'
        if usage >= self.thresholds['memory_warning']:
            logger.info(f"System memory at {usage:.0f}%")
            return 'warning'
        return None

    def summary(self) -> Dict:
        cpu = [s['cpu_percent'] for s in self.samples if 'cpu_percent' in s]
        return {
            'peak_rss_mb': round(self.peak_rss / (1024 * 1024), 2),
            'mean_cpu_percent': round(sum(cpu) / len(cpu), 1) if cpu else None,
            'cpu_count': psutil.cpu_count(logical=True),
            'workers': self.workers,
            'samples': len(self.samples),
            'elapsed_s': round(time.time() - self.started, 3),
        }
