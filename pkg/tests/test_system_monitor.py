"""Tests for process resource sampling"""

import logging

from modules.system_monitor import ResourceMonitor


def test_sample_tracks_peak_rss():
    monitor = ResourceMonitor(workers=2)
    data = monitor.sample()
    assert data['rss_mb'] > 0
    assert monitor.peak_rss > 0
    summary = monitor.summary()
    assert summary['workers'] == 2
    assert summary['samples'] == 1
    assert summary['peak_rss_mb'] >= round(data['rss_mb'], 2) - 0.01


def test_history_is_bounded():
    monitor = ResourceMonitor(history=3)
    for _ in range(5):
        monitor.sample()
    assert len(monitor.samples) == 3


def test_memory_alerts(caplog):
    monitor = ResourceMonitor()
    with caplog.at_level(logging.WARNING, logger="modules.system_monitor"):
        assert monitor._check_alerts({'system_memory_percent': 97.0}) == 'critical'
    assert "System memory at 97%" in caplog.text
    assert monitor._check_alerts({'system_memory_percent': 88.0}) == 'warning'
    assert monitor._check_alerts({'system_memory_percent': 10.0}) is None


def test_empty_summary():
    summary = ResourceMonitor().summary()
    assert summary['mean_cpu_percent'] is None
    assert summary['peak_rss_mb'] == 0
