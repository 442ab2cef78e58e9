import time

import numpy as np
import pytest

from sttpersonal.memory import PeakMemorySampler, current_rss


def test_peak_covers_an_allocation():
    with PeakMemorySampler(0.01) as sampler:
        block = np.ones(32 * 1024 * 1024 // 8)
        time.sleep(0.05)
        del block
    assert sampler.peak_bytes >= current_rss() // 2
    assert sampler.samples >= 2


def test_peak_is_at_least_the_baseline():
    baseline = current_rss()
    with PeakMemorySampler() as sampler:
        pass
    assert sampler.peak_bytes >= baseline * 0.9


def test_reset():
    sampler = PeakMemorySampler(0.01)
    sampler.start()
    sampler.reset()
    assert sampler.peak_bytes > 0
    sampler.stop()


def test_interval_bounds():
    with pytest.raises(ValueError):
        PeakMemorySampler(0.0)
    with pytest.raises(ValueError):
        PeakMemorySampler(0.5)


def test_double_start():
    sampler = PeakMemorySampler()
    sampler.start()
    try:
        with pytest.raises(RuntimeError):
            sampler.start()
    finally:
        sampler.stop()
