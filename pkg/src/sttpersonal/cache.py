"""発話キャッシュ。

レイアウト::

    root/manifest.jsonl   {"id", "audio", "text", "dur_s"} を1行ずつ
    root/audio/<id>.wav
    root/drain.json       確定待ちの取り出し (トークンとid)

取り出した発話は :meth:`UtteranceCache.confirm` にトークンを渡すまで削除されません。
"""

import json
import logging
import os
import secrets
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Final, Iterable, Iterator

import numpy as np

from .alphabet import normalize_transcript
from .audio import AudioBuffer
from .dataset import ManifestEntry
from .errors import BadToken, ConfigError, EmptyDataset, NotReady
from .wavfile import write_wav

_logger = logging.getLogger(__name__)

MANIFEST_NAME: Final = "manifest.jsonl"
AUDIO_DIR: Final = "audio"
DRAIN_NAME: Final = "drain.json"


@dataclass(frozen=True)
class Utterance:
    id: str
    audio: Path
    text: str
    dur_s: float

    def entry(self, voice: str | None = None) -> ManifestEntry:
        return ManifestEntry(self.audio, self.text, self.id, voice, self.dur_s)


@dataclass(frozen=True)
class DrainSession:
    token: str
    train: tuple[Utterance, ...]
    validation: tuple[Utterance, ...]


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


class UtteranceCache:
    """書き込みは1つに限ります。同一プロセス内はロックで直列化します。"""

    __slots__ = ("_root", "_trigger", "_validation_size", "_seed", "_items", "_lock")
    _root: Path
    _trigger: int
    _validation_size: int
    _seed: int
    _items: dict[str, Utterance]

    def __init__(self, root: str | Path, trigger: int = 60, validation_size: int = 10, seed: int = 0) -> None:
        if trigger < 1:
            raise ConfigError("cache trigger N must be >= 1")
        if validation_size < 1:
            raise ConfigError("validation_size must be >= 1")
        self._root = Path(root)
        self._trigger = trigger
        self._validation_size = validation_size
        self._seed = seed
        self._lock = threading.Lock()
        (self._root / AUDIO_DIR).mkdir(parents=True, exist_ok=True)
        self._items = self._recover()

    @property
    def root(self) -> Path:
        return self._root

    @property
    def trigger(self) -> int:
        return self._trigger

    @property
    def manifest_path(self) -> Path:
        return self._root / MANIFEST_NAME

    @property
    def drain_path(self) -> Path:
        return self._root / DRAIN_NAME

    def _recover(self) -> dict[str, Utterance]:
        """マニフェストを読み、書きかけの最終行とマニフェストに無い音声ファイルを片付けます。"""
        items: dict[str, Utterance] = {}
        repaired = False
        if self.manifest_path.exists():
            for line in self.manifest_path.read_text(encoding="utf-8").splitlines():
                try:
                    record = json.loads(line)
                    utt = Utterance(
                        str(record["id"]), self._root / record["audio"], str(record["text"]), float(record["dur_s"])
                    )
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    _logger.warning("dropping unreadable manifest line in %s", self.manifest_path)
                    repaired = True
                    continue
                if not utt.audio.exists():
                    _logger.warning("%s: audio file missing, entry dropped", utt.id)
                    repaired = True
                    continue
                items[utt.id] = utt
        known = {utt.audio.resolve() for utt in items.values()}
        for path in (self._root / AUDIO_DIR).iterdir():
            if path.resolve() not in known:
                _logger.warning("removing orphan audio file %s", path)
                path.unlink()
        if repaired:
            self._rewrite_manifest(items.values())
        return items

    def _record(self, utt: Utterance) -> str:
        return json.dumps(
            {
                "id": utt.id,
                "audio": utt.audio.relative_to(self._root).as_posix(),
                "text": utt.text,
                "dur_s": round(utt.dur_s, 4),
            },
            sort_keys=True,
        )

    def _rewrite_manifest(self, items: Iterable[Utterance]) -> None:
        lines = [self._record(utt) + "\n" for utt in items]
        _write_atomic(self.manifest_path, "".join(lines))

    def _next_id(self) -> str:
        n = len(self._items)
        while f"utt{n:05d}" in self._items or (self._root / AUDIO_DIR / f"utt{n:05d}.wav").exists():
            n += 1
        return f"utt{n:05d}"

    def add_utterance(self, audio: AudioBuffer | str | Path, transcript: str) -> int:
        """正規化した書き起こしと音声を保存し、保存後の件数を返します。"""
        text = normalize_transcript(transcript)
        if not isinstance(audio, AudioBuffer):
            audio = AudioBuffer.from_wav(audio)
        with self._lock:
            utt_id = self._next_id()
            path = self._root / AUDIO_DIR / f"{utt_id}.wav"
            write_wav(path, audio.samples)
            utt = Utterance(utt_id, path, text, audio.duration_s)
            with open(self.manifest_path, "a", encoding="utf-8", newline="\n") as f:
                f.write(self._record(utt) + "\n")
                f.flush()
                os.fsync(f.fileno())
            self._items[utt_id] = utt
            count = len(self._items)
        if count == self._trigger:
            _logger.info("cache %s reached N=%d utterances", self._root, self._trigger)
        return count

    @property
    def count(self) -> int:
        return len(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Utterance]:
        return iter(list(self._items.values()))

    def get_or_none(self, utt_id: str) -> Utterance | None:
        return self._items.get(utt_id)

    def ready(self) -> bool:
        return len(self._items) >= self._trigger

    def pending_token_or_none(self) -> str | None:
        if not self.drain_path.exists():
            return None
        return str(json.loads(self.drain_path.read_text(encoding="utf-8"))["token"])

    def drain(self) -> DrainSession:
        """全件を学習用と検証用に分けます。削除は :meth:`confirm` まで行いません。"""
        with self._lock:
            if len(self._items) < self._trigger:
                raise NotReady(len(self._items), self._trigger)
            if len(self._items) <= self._validation_size:
                raise EmptyDataset(
                    f"{len(self._items)} utterances leave no training split after {self._validation_size} held out"
                )
            ids = sorted(self._items)
            order = np.random.default_rng(self._seed).permutation(len(ids))
            val_ids = [ids[i] for i in order[: self._validation_size]]
            train_ids = [ids[i] for i in order[self._validation_size :]]
            token = secrets.token_hex(16)
            _write_atomic(self.drain_path, json.dumps({"token": token, "ids": train_ids + val_ids}))
        _logger.info("drained %d training and %d validation utterances", len(train_ids), len(val_ids))
        return DrainSession(
            token,
            tuple(self._items[i] for i in train_ids),
            tuple(self._items[i] for i in val_ids),
        )

    def confirm(self, token: str) -> int:
        """学習の完了を確定し、取り出した発話を削除します。削除した件数を返します。"""
        with self._lock:
            pending = self.pending_token_or_none()
            if pending is None:
                raise BadToken("no drain is pending")
            if not secrets.compare_digest(pending, token):
                raise BadToken("completion token does not match the pending drain")
            ids = json.loads(self.drain_path.read_text(encoding="utf-8"))["ids"]
            drained = [self._items.pop(i) for i in ids if i in self._items]
            self._rewrite_manifest(self._items.values())
            for utt in drained:
                utt.audio.unlink(missing_ok=True)
            self.drain_path.unlink()
        _logger.info("cleared %d utterances from %s", len(drained), self._root)
        return len(drained)
