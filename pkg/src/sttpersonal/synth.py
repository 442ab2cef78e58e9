"""合成音声コーパス。

文字ごとに固定の2音 (低域と高域) を鳴らし、語の間に無音を入れます。話者 (voice) は
周波数の倍率・高域の強さ・話速で区別します。書き起こしは構成から復元できます。
"""

import logging
from dataclasses import dataclass
from functools import cache
from pathlib import Path
from typing import Final

import numpy as np

from .alphabet import ALPHABET
from .dataset import ManifestEntry, write_manifest
from .errors import ConfigError
from .wavfile import SAMPLE_RATE, write_wav

_logger = logging.getLogger(__name__)

LOW_TONES_HZ: Final = (320.0, 390.0, 475.0, 580.0, 710.0, 865.0, 1055.0, 1290.0, 1575.0)
HIGH_TONES_HZ: Final = (2200.0, 3000.0, 4100.0)
AMPLITUDE: Final = 0.3
NOISE_FLOOR: Final = 1e-3
RAMP_S: Final = 0.005

# 1〜6は学習用、7は学習に使わない話者として範囲外に置きます。
_VOICE_PITCH: Final = (0.94, 0.964, 0.988, 1.012, 1.036, 1.06, 1.18)
_VOICE_TILT: Final = (0.5, 0.6, 0.7, 0.6, 0.5, 0.7, 0.35)
_VOICE_RATE: Final = (1.0, 0.95, 1.05, 1.0, 1.1, 0.9, 1.15)

VOCABULARY: Final = (
    "the", "a", "and", "to", "of", "in", "is", "it", "you", "that",
    "he", "was", "for", "on", "are", "with", "they", "be", "at", "one",
    "have", "this", "from", "by", "hot", "word", "but", "what", "some", "we",
    "can", "out", "other", "were", "all", "there", "when", "up", "use", "your",
    "how", "said", "an", "each", "she", "which", "do", "their", "time", "if",
    "will", "way", "about", "many", "then", "them", "write", "would", "like", "so",
    "don't", "it's", "i'm", "can't", "phone", "voice", "model", "speech", "quiet", "zebra",
    "jump", "box", "quick", "lazy", "fox", "very", "next", "just", "keep", "call",
)


@dataclass(frozen=True)
class VoiceProfile:
    index: int
    pitch: float
    tilt: float
    rate: float

    @property
    def name(self) -> str:
        return f"voice{self.index}"


def voice_profile(index: int) -> VoiceProfile:
    """1始まりの話者番号から決まる話者。8以降は番号から乱数で作ります。"""
    if index < 1:
        raise ConfigError("voice index must be >= 1")
    if index <= len(_VOICE_PITCH):
        i = index - 1
        return VoiceProfile(index, _VOICE_PITCH[i], _VOICE_TILT[i], _VOICE_RATE[i])
    rng = np.random.default_rng(index)
    return VoiceProfile(index, float(rng.uniform(0.85, 1.15)), float(rng.uniform(0.35, 0.7)), float(rng.uniform(0.9, 1.15)))


@cache
def tone_table() -> dict[str, tuple[float, float]]:
    """空白以外の各文字の (低域, 高域) 周波数。"""
    symbols = [c for c in ALPHABET if c != " "]
    assert len(symbols) <= len(LOW_TONES_HZ) * len(HIGH_TONES_HZ)
    return {c: (LOW_TONES_HZ[i % len(LOW_TONES_HZ)], HIGH_TONES_HZ[i // len(LOW_TONES_HZ)]) for i, c in enumerate(symbols)}


@dataclass(frozen=True)
class SynthConfig:
    voices: int = 7
    utterances_per_voice: int = 70
    seed: int = 0
    mean_duration_s: float = 7.0
    char_s: float = 0.07
    gap_s: float = 0.04
    word_gap_s: float = 0.12

    def __post_init__(self) -> None:
        if self.voices < 1:
            raise ConfigError("voices must be >= 1")
        if self.utterances_per_voice < 1:
            raise ConfigError("utterances_per_voice must be >= 1")
        if not self.mean_duration_s > 0.0:
            raise ConfigError("mean_duration_s must be > 0")
        if min(self.char_s, self.gap_s, self.word_gap_s) <= 0.0:
            raise ConfigError("segment durations must be > 0")


def _segment(n: int, f_low: float, f_high: float, tilt: float, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
    tone = np.sin(2.0 * np.pi * f_low * t + phase[0]) + tilt * np.sin(2.0 * np.pi * f_high * t + phase[1])
    ramp = min(int(RAMP_S * SAMPLE_RATE), n // 2)
    env = np.ones(n)
    if ramp:
        rise = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = rise
        env[n - ramp :] = rise[::-1]
    return AMPLITUDE / (1.0 + tilt) * env * tone


def synthesize(text: str, voice: VoiceProfile, config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """正規化済みの書き起こしから波形を作ります。"""
    table = tone_table()
    char_n = config.char_s / voice.rate
    gap_n = int(config.gap_s / voice.rate * SAMPLE_RATE)
    word_gap_n = int(config.word_gap_s / voice.rate * SAMPLE_RATE)
    parts: list[np.ndarray] = [np.zeros(word_gap_n)]
    # 発話ごとのわずかな音高の揺れ
    jitter = 1.0 + float(rng.normal(0.0, 0.005))
    for c in text:
        if c == " ":
            parts.append(np.zeros(word_gap_n))
            continue
        f_low, f_high = table[c]
        n = int(char_n * float(rng.uniform(0.9, 1.1)) * SAMPLE_RATE)
        parts.append(_segment(n, f_low * voice.pitch * jitter, f_high * voice.pitch * jitter, voice.tilt, rng))
        parts.append(np.zeros(gap_n))
    parts.append(np.zeros(word_gap_n))
    signal = np.concatenate(parts)
    return signal + rng.normal(0.0, NOISE_FLOOR, size=signal.size)


def estimated_duration_s(text: str, voice: VoiceProfile, config: SynthConfig) -> float:
    chars = sum(1 for c in text if c != " ")
    words_gaps = text.count(" ") + 2
    return (chars * (config.char_s + config.gap_s) + words_gaps * config.word_gap_s) / voice.rate


def sample_text(voice: VoiceProfile, config: SynthConfig, rng: np.random.Generator) -> str:
    """目標の長さに達するまで語彙から単語を選びます。"""
    target = float(np.clip(rng.normal(config.mean_duration_s, 0.15 * config.mean_duration_s), 0.5, None))
    words = [str(rng.choice(VOCABULARY))]
    while True:
        word = str(rng.choice(VOCABULARY))
        if estimated_duration_s(" ".join([*words, word]), voice, config) > target:
            break
        words.append(word)
    return " ".join(words)


def utterance_rng(seed: int, voice: int, n: int) -> np.random.Generator:
    return np.random.default_rng([seed, voice, n])


def generate_corpus(config: SynthConfig, out_dir: str | Path) -> list[ManifestEntry]:
    """``out_dir/voiceN/uttNNN.wav`` とマニフェスト ``out_dir/manifest.jsonl`` を書きます。"""
    out_dir = Path(out_dir)
    entries: list[ManifestEntry] = []
    for v in range(1, config.voices + 1):
        voice = voice_profile(v)
        (out_dir / voice.name).mkdir(parents=True, exist_ok=True)
        for n in range(config.utterances_per_voice):
            rng = utterance_rng(config.seed, v, n)
            text = sample_text(voice, config, rng)
            samples = synthesize(text, voice, config, rng)
            path = out_dir / voice.name / f"utt{n:03d}.wav"
            write_wav(path, samples)
            entries.append(ManifestEntry(path, text, f"{voice.name}-{n:03d}", voice.name, samples.size / SAMPLE_RATE))
        _logger.info("synthesized %d utterances for %s", config.utterances_per_voice, voice.name)
    write_manifest(out_dir / "manifest.jsonl", entries)
    return entries
