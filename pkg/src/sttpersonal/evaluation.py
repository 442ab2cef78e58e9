"""単語誤り率 (WER) と評価レポート。"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Final, Sequence

import numpy as np

from .ctc import ctc_loss, greedy_decode
from .dataset import Sample, batches
from .errors import EmptyDataset, Infeasible
from .model import ParamSet, forward_batch

_logger = logging.getLogger(__name__)

_REPORT_KEYS: Final = frozenset({"items", "mean_wer", "word_weighted_wer", "mean_loss"})
_ITEM_KEYS: Final = frozenset({"id", "ref", "hyp", "wer"})


@dataclass(frozen=True)
class WerBreakdown:
    substitutions: int
    deletions: int
    insertions: int
    ref_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer_percent(self) -> float:
        return 100.0 * self.errors / max(self.ref_words, 1)


def edit_distance_words(ref: Sequence[str], hyp: Sequence[str]) -> WerBreakdown:
    """単位コストの最小編集。コストが等しい整列では挿入の少ない方、次に削除の少ない方を選びます。"""
    # セルの値は (コスト, 挿入, 削除, 置換)。先頭3要素の辞書式順序で比較します。
    prev = [(j, j, 0, 0) for j in range(len(hyp) + 1)]
    for i in range(1, len(ref) + 1):
        cur = [(i, 0, i, 0)]
        for j in range(1, len(hyp) + 1):
            c, n_ins, n_del, n_sub = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                diag = (c, n_ins, n_del, n_sub)
            else:
                diag = (c + 1, n_ins, n_del, n_sub + 1)
            c, n_ins, n_del, n_sub = prev[j]
            delete = (c + 1, n_ins, n_del + 1, n_sub)
            c, n_ins, n_del, n_sub = cur[j - 1]
            insert = (c + 1, n_ins + 1, n_del, n_sub)
            cur.append(min(diag, delete, insert, key=lambda cell: cell[:3]))
        prev = cur
    _, n_ins, n_del, n_sub = prev[-1]
    return WerBreakdown(n_sub, n_del, n_ins, len(ref))


def tokenize(text: str) -> list[str]:
    return text.split()


def wer(ref: str, hyp: str) -> WerBreakdown:
    return edit_distance_words(tokenize(ref), tokenize(hyp))


@dataclass(frozen=True)
class ItemResult:
    id: str
    ref: str
    hyp: str
    wer: float
    loss: float | None = None


@dataclass(frozen=True)
class EvalReport:
    items: tuple[ItemResult, ...]
    mean_wer: float
    word_weighted_wer: float
    mean_loss: float | None

    @staticmethod
    def from_items(items: Sequence[ItemResult], breakdowns: Sequence[WerBreakdown]) -> "EvalReport":
        if not items:
            raise EmptyDataset("nothing to evaluate")
        losses = [item.loss for item in items if item.loss is not None]
        mean_loss = float(np.mean(losses)) if losses else None
        errors = sum(b.errors for b in breakdowns)
        words = sum(b.ref_words for b in breakdowns)
        return EvalReport(
            items=tuple(items),
            mean_wer=float(np.mean([item.wer for item in items])),
            word_weighted_wer=100.0 * errors / max(words, 1),
            mean_loss=mean_loss,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "items": [{"id": i.id, "ref": i.ref, "hyp": i.hyp, "wer": i.wer} for i in self.items],
            "mean_wer": self.mean_wer,
            "word_weighted_wer": self.word_weighted_wer,
            "mean_loss": self.mean_loss,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False)

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        """スキーマを検証して読み込みます。不正な場合は ``ValueError``。"""
        d = json.loads(text)
        _require(isinstance(d, dict) and set(d) == _REPORT_KEYS, "top-level keys")
        _require(isinstance(d["items"], list), "items must be a list")
        items: list[ItemResult] = []
        for n, item in enumerate(d["items"]):
            _require(isinstance(item, dict) and set(item) == _ITEM_KEYS, f"items[{n}] keys")
            _require(all(isinstance(item[k], str) for k in ("id", "ref", "hyp")), f"items[{n}] strings")
            _require(_is_number(item["wer"]) and item["wer"] >= 0.0, f"items[{n}].wer")
            items.append(ItemResult(item["id"], item["ref"], item["hyp"], float(item["wer"])))
        for key in ("mean_wer", "word_weighted_wer"):
            _require(_is_number(d[key]) and d[key] >= 0.0, key)
        _require(d["mean_loss"] is None or _is_number(d["mean_loss"]), "mean_loss")
        return EvalReport(
            tuple(items),
            float(d["mean_wer"]),
            float(d["word_weighted_wer"]),
            None if d["mean_loss"] is None else float(d["mean_loss"]),
        )


def _is_number(value: object) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _require(cond: bool, what: str) -> None:
    if not cond:
        raise ValueError(f"report does not match the schema: {what}")


def evaluate_set(params: ParamSet, samples: Sequence[Sample], batch_size: int = 5) -> EvalReport:
    """各発話を認識してWERと損失を集計します。平均WERは発話ごとの単純平均です。

    ラベルに対してフレームが足りない発話は損失を ``None`` とし、WERだけを数えます。
    平均損失はそれ以外の発話の平均です。
    """
    if not samples:
        raise EmptyDataset("evaluation set is empty")
    items: list[ItemResult] = []
    breakdowns: list[WerBreakdown] = []
    for batch in batches(samples, batch_size):
        logits, tape = forward_batch(params, [s.features for s in batch])
        for b, sample in enumerate(batch):
            length = int(tape.lengths[b])
            loss: float | None
            try:
                loss = ctc_loss(logits[b], sample.label, length).loss
            except Infeasible as e:
                _logger.warning("%s: no CTC loss (%s)", sample.id, e)
                loss = None
            hyp = greedy_decode(logits[b], length)
            breakdown = wer(sample.text, hyp)
            breakdowns.append(breakdown)
            items.append(ItemResult(sample.id, sample.text, hyp, breakdown.wer_percent, loss))
    report = EvalReport.from_items(items, breakdowns)
    _logger.info(
        "evaluated %d utterances: mean WER %.2f%%, word-weighted %.2f%%, mean loss %s",
        len(items),
        report.mean_wer,
        report.word_weighted_wer,
        "n/a" if report.mean_loss is None else f"{report.mean_loss:.4f}",
    )
    return report


@dataclass(frozen=True)
class SpeakerResult:
    speaker: str
    baseline_wer: float
    personalized_wer: float
    epochs: int
    mean_epoch_s: float

    @property
    def drop(self) -> float:
        return self.baseline_wer - self.personalized_wer


@dataclass
class SpeakerReport:
    """話者ごとの適応前後のWER。"""

    speakers: list[SpeakerResult] = field(default_factory=list)

    def add(self, result: SpeakerResult) -> None:
        self.speakers.append(result)

    @property
    def mean_drop(self) -> float:
        if not self.speakers:
            raise EmptyDataset("no speakers in the report")
        return float(np.mean([s.drop for s in self.speakers]))

    def to_dict(self) -> dict[str, Any]:
        return {
            "speakers": [{**asdict(s), "drop": s.drop} for s in self.speakers],
            "mean_drop": self.mean_drop if self.speakers else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)
