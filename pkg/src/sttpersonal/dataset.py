"""マニフェスト (JSON Lines) と学習用サンプル。"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .alphabet import encode, normalize_transcript
from .audio import AudioBuffer, log_mel
from .errors import ConfigError

_logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ManifestEntry:
    audio: Path
    text: str
    id: str = ""
    voice: str | None = None
    dur_s: float | None = None

    def to_dict(self, base: Path | None = None) -> dict[str, object]:
        audio = self.audio
        if base is not None and audio.is_relative_to(base):
            audio = audio.relative_to(base)
        d: dict[str, object] = {"audio": audio.as_posix(), "text": self.text}
        if self.id:
            d["id"] = self.id
        if self.voice is not None:
            d["voice"] = self.voice
        if self.dur_s is not None:
            d["dur_s"] = round(self.dur_s, 4)
        return d


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    """相対パスのaudioはマニフェストのディレクトリ基準で解決します。"""
    path = Path(path)
    entries: list[ManifestEntry] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                audio = Path(record["audio"])
                text = str(record["text"])
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ConfigError(f"{path}:{lineno}: bad manifest line ({e})") from e
            if not audio.is_absolute():
                audio = path.parent / audio
            voice = record.get("voice")
            entries.append(
                ManifestEntry(
                    audio=audio,
                    text=text,
                    id=str(record.get("id", audio.stem)),
                    voice=None if voice is None else str(voice),
                    dur_s=record.get("dur_s"),
                )
            )
    return entries


def write_manifest(path: str | Path, entries: Iterable[ManifestEntry]) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for entry in entries:
            f.write(json.dumps(entry.to_dict(path.parent), sort_keys=True) + "\n")


@dataclass(frozen=True)
class Sample:
    """特徴量とラベルを持つ1発話。"""

    id: str
    features: np.ndarray
    text: str
    label: np.ndarray = field(repr=False)
    voice: str | None = None

    @staticmethod
    def from_audio(id: str, audio: AudioBuffer, text: str, voice: str | None = None) -> "Sample":
        text = normalize_transcript(text)
        return Sample(id, log_mel(audio).frames, text, encode(text), voice)

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


def featurize_many(
    items: Sequence[tuple[str, AudioBuffer, str, str | None]], max_workers: int | None = None
) -> list[Sample]:
    """順序を保ったままスレッドプールで特徴量を計算します。"""
    if not items:
        return []
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda item: Sample.from_audio(*item), items))


def load_samples(entries: Sequence[ManifestEntry], max_workers: int | None = None) -> list[Sample]:
    items = [(e.id, AudioBuffer.from_wav(e.audio), e.text, e.voice) for e in entries]
    samples = featurize_many(items, max_workers)
    _logger.info("featurized %d utterances (%d frames)", len(samples), sum(s.num_frames for s in samples))
    return samples


def batches(samples: Sequence[Sample], batch_size: int, order: np.ndarray | None = None) -> Iterator[list[Sample]]:
    """末尾の短いバッチも返します。"""
    index = np.arange(len(samples)) if order is None else order
    for start in range(0, len(index), batch_size):
        yield [samples[i] for i in index[start : start + batch_size]]


def by_voice(entries: Iterable[ManifestEntry]) -> dict[str | None, list[ManifestEntry]]:
    grouped: dict[str | None, list[ManifestEntry]] = {}
    for entry in entries:
        grouped.setdefault(entry.voice, []).append(entry)
    return grouped
