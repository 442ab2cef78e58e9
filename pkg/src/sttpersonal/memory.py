"""プロセスの常駐メモリ (RSS) のピーク計測。"""

import logging
import threading
from typing import Final, Self

import psutil

_logger = logging.getLogger(__name__)

DEFAULT_INTERVAL_S: Final = 0.1


class PeakMemorySampler:
    """別スレッドでRSSを周期的に読み、最大値を保持します。

    ``with`` ブロックで使います::

        with PeakMemorySampler() as sampler:
            run()
        print(sampler.peak_bytes)
    """

    __slots__ = ("_interval", "_process", "_peak", "_samples", "_stop", "_thread", "_lock")

    def __init__(self, interval_s: float = DEFAULT_INTERVAL_S) -> None:
        if not 0.0 < interval_s <= 0.25:
            raise ValueError("interval_s must be in (0, 0.25] to sample at 4 Hz or faster")
        self._interval = interval_s
        self._process = psutil.Process()
        self._peak = 0
        self._samples = 0
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._lock = threading.Lock()

    def _sample(self) -> None:
        rss = self._process.memory_info().rss
        with self._lock:
            self._samples += 1
            if rss > self._peak:
                self._peak = rss

    def _run(self) -> None:
        while not self._stop.wait(self._interval):
            self._sample()

    def start(self) -> None:
        if self._thread is not None:
            raise RuntimeError("sampler already started")
        self._stop.clear()
        self._sample()
        self._thread = threading.Thread(target=self._run, name="peak-rss", daemon=True)
        self._thread.start()

    def stop(self) -> int:
        if self._thread is not None:
            self._stop.set()
            self._thread.join()
            self._thread = None
        self._sample()
        _logger.debug("peak rss %d bytes over %d samples", self._peak, self._samples)
        return self._peak

    def reset(self) -> None:
        """次のエポック用にピークを現在値から測り直します。"""
        with self._lock:
            self._peak = 0
        self._sample()

    @property
    def peak_bytes(self) -> int:
        with self._lock:
            return self._peak

    @property
    def samples(self) -> int:
        with self._lock:
            return self._samples

    def __enter__(self) -> Self:
        self.start()
        return self

    def __exit__(self, *exc: object) -> None:
        self.stop()


def current_rss() -> int:
    return psutil.Process().memory_info().rss
