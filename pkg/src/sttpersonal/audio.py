"""音声フロントエンド。PCMから80次元の対数メルスペクトログラムを作ります。

窓長32 ms (512サンプル)、シフト16 ms (256サンプル)、Hann窓、FFT長512、
HTK式メル尺度 (0〜8000 Hz) の三角フィルター80本、対数の下限は1e-10です。
"""

from dataclasses import dataclass, field
from functools import cache
from pathlib import Path
from typing import Final

import numpy as np

from .errors import BadAudio, SilentSignal, TooShort
from .wavfile import SAMPLE_RATE, read_wav

FRAME_LENGTH: Final = 512
HOP_LENGTH: Final = 256
N_FFT: Final = 512
N_MELS: Final = 80
F_MIN: Final = 0.0
F_MAX: Final = SAMPLE_RATE / 2
LOG_FLOOR: Final = 1e-10
CLEAN: Final = float("inf")


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise BadAudio(f"expected mono samples, got shape {samples.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise BadAudio(f"sample rate {self.sample_rate} Hz, expected {SAMPLE_RATE}")
        if not np.all(np.isfinite(samples)):
            raise BadAudio("samples contain non-finite values")
        object.__setattr__(self, "samples", samples)

    @staticmethod
    def from_wav(path: str | Path) -> "AudioBuffer":
        return AudioBuffer(read_wav(path))

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return self.num_samples / self.sample_rate

    @property
    def power(self) -> float:
        return float(np.mean(self.samples**2)) if self.num_samples else 0.0


@dataclass(frozen=True)
class FeatureMatrix:
    """T×80の対数メル特徴量。"""

    frames: np.ndarray
    frame_duration_ms: int = field(default=32, init=False)
    hop_ms: int = field(default=16, init=False)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_bins(self) -> int:
        return self.frames.shape[1]


def num_frames(num_samples: int) -> int:
    if num_samples < FRAME_LENGTH:
        return 0
    return (num_samples - FRAME_LENGTH) // HOP_LENGTH + 1


def frame_signal(audio: AudioBuffer) -> np.ndarray:
    """512サンプルのフレーム列 (T×512、読み取り専用ビュー) を返します。端数の窓は捨てます。"""
    n = audio.num_samples
    if n < FRAME_LENGTH:
        raise TooShort(f"{n} samples, at least {FRAME_LENGTH} required")
    windows = np.lib.stride_tricks.sliding_window_view(audio.samples, FRAME_LENGTH)
    return windows[::HOP_LENGTH]


def hz_to_mel(f: np.ndarray | float) -> np.ndarray:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m: np.ndarray | float) -> np.ndarray:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@cache
def mel_edges_hz() -> np.ndarray:
    """N_MELS+2個のフィルター端点 (Hz)。i番目のフィルターの中心は ``edges[i + 1]`` です。"""
    mels = np.linspace(hz_to_mel(F_MIN), hz_to_mel(F_MAX), N_MELS + 2)
    edges = mel_to_hz(mels)
    edges.setflags(write=False)
    return edges


def mel_centers_hz() -> np.ndarray:
    return mel_edges_hz()[1:-1]


@cache
def mel_filterbank() -> np.ndarray:
    """(N_FFT//2+1)×N_MELS の三角フィルター行列。ピークは1です。"""
    edges = mel_edges_hz()
    bins_hz = np.fft.rfftfreq(N_FFT, d=1.0 / SAMPLE_RATE)
    lower, center, upper = edges[:-2], edges[1:-1], edges[2:]
    f = bins_hz[:, None]
    rising = (f - lower) / (center - lower)
    falling = (upper - f) / (upper - center)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    bank.setflags(write=False)
    return bank


@cache
def hann_window() -> np.ndarray:
    # periodic Hann
    n = np.arange(FRAME_LENGTH)
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / FRAME_LENGTH)
    window.setflags(write=False)
    return window


def power_spectrum(frames: np.ndarray) -> np.ndarray:
    spectrum = np.fft.rfft(frames * hann_window(), n=N_FFT, axis=-1)
    return spectrum.real**2 + spectrum.imag**2


def log_mel(audio: AudioBuffer) -> FeatureMatrix:
    frames = frame_signal(audio)
    energy = power_spectrum(frames) @ mel_filterbank()
    return FeatureMatrix(np.log(energy + LOG_FLOOR))


def augment_noise(audio: AudioBuffer, snr_db: float, seed: int) -> AudioBuffer:
    """指定SNRの白色ガウス雑音を加えます。``snr_db`` が +inf のときは入力をそのまま返します。"""
    if snr_db == CLEAN:
        return audio
    p_signal = audio.power
    if p_signal == 0.0:
        raise SilentSignal("signal power is zero, SNR is undefined")
    noise = np.random.default_rng(seed).standard_normal(audio.num_samples)
    p_target = p_signal / 10.0 ** (snr_db / 10.0)
    noise *= np.sqrt(p_target / np.mean(noise**2))
    return AudioBuffer(audio.samples + noise, audio.sample_rate)


def measured_snr_db(clean: AudioBuffer, noisy: AudioBuffer) -> float:
    noise = noisy.samples - clean.samples
    return float(10.0 * np.log10(clean.power / np.mean(noise**2)))
