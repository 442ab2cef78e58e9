"""CTC損失 (対数空間の前向き・後ろ向きアルゴリズム) と貪欲デコード。

ブランクは最後のインデックスです。損失は自然対数の負の対数尤度です。
"""

import itertools
from dataclasses import dataclass
from functools import cache
from typing import Final, Sequence

import numpy as np

from .alphabet import symbols_for
from .errors import BudgetExceeded, EmptyDataset, Infeasible, LabelError

BRUTE_FORCE_MAX_FRAMES: Final = 8
BRUTE_FORCE_MAX_SYMBOLS: Final = 4


@dataclass(frozen=True)
class CtcResult:
    loss: float
    dlogits: np.ndarray


@dataclass(frozen=True)
class CtcItem:
    logits: np.ndarray
    label: Sequence[int] | np.ndarray
    logit_len: int | None = None
    label_len: int | None = None


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def required_frames(label: Sequence[int] | np.ndarray) -> int:
    """ラベルの出力に必要な最小フレーム数 (長さ + 連続する重複の数)。"""
    label = np.asarray(label)
    return int(label.size + np.count_nonzero(label[1:] == label[:-1]))


def _check_label(label: np.ndarray, alphabet_size: int) -> None:
    if label.size and (label.min() < 0 or label.max() > alphabet_size - 2):
        raise LabelError(f"label symbols must lie in [0, {alphabet_size - 2}]; blank is {alphabet_size - 1}")


def _extend(label: np.ndarray, blank: int) -> tuple[np.ndarray, np.ndarray]:
    """ブランクを挟んだ拡張ラベルと、s-2 からの遷移の可否を返します。"""
    ext = np.full(2 * label.size + 1, blank, dtype=np.int64)
    ext[1::2] = label
    skip = np.zeros(ext.size, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return ext, skip


def _logsumexp3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.logaddexp(np.logaddexp(a, b), c)


def ctc_loss(
    logits: np.ndarray, label: Sequence[int] | np.ndarray, logit_len: int | None = None, label_len: int | None = None
) -> CtcResult:
    """``logits`` (T×A) とラベルからCTC損失とロジットに対する勾配を求めます。

    ``logit_len`` 以降の行は無視され、勾配は0になります。
    """
    logits = np.asarray(logits)
    frames_total, alphabet_size = logits.shape
    frames = frames_total if logit_len is None else int(logit_len)
    label = np.asarray(label, dtype=np.int64)
    if label_len is not None:
        if label_len > label.size:
            raise LabelError(f"label_len {label_len} exceeds label of length {label.size}")
        label = label[:label_len]
    if not 0 < frames <= frames_total:
        raise Infeasible(f"logit_len {frames} outside [1, {frames_total}]")
    _check_label(label, alphabet_size)
    needed = required_frames(label)
    if needed > frames:
        raise Infeasible(f"label needs {needed} frames, only {frames} available")

    blank = alphabet_size - 1
    ext, skip = _extend(label, blank)
    states = ext.size
    work = logits[:frames].astype(np.float64)
    logp = log_softmax(work)
    emit = logp[:, ext]  # (T, S)

    neg_inf = -np.inf
    alpha = np.full((frames, states), neg_inf)
    alpha[0, 0] = emit[0, 0]
    if states > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, frames):
        prev = alpha[t - 1]
        shift1 = np.concatenate(([neg_inf], prev[:-1]))
        shift2 = np.where(skip, np.concatenate(([neg_inf, neg_inf], prev[:-2]))[:states], neg_inf)
        alpha[t] = _logsumexp3(prev, shift1, shift2) + emit[t]

    beta = np.full((frames, states), neg_inf)
    beta[-1, -1] = 0.0
    if states > 1:
        beta[-1, -2] = 0.0
    skip_from = np.zeros(states, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(frames - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        shift1 = np.concatenate((nxt[1:], [neg_inf]))
        shift2 = np.where(skip_from, np.concatenate((nxt[2:], [neg_inf, neg_inf]))[:states], neg_inf)
        beta[t] = _logsumexp3(nxt, shift1, shift2)

    log_prob = alpha[-1, -1] if states == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    if not np.isfinite(log_prob):
        raise Infeasible("label has zero probability under the logits")

    posterior = np.zeros((frames, alphabet_size))
    np.add.at(posterior.T, ext, np.exp(alpha + beta - log_prob).T)
    dlogits = np.zeros(logits.shape, dtype=np.float64)
    dlogits[:frames] = np.exp(logp) - posterior
    return CtcResult(float(-log_prob), dlogits.astype(logits.dtype, copy=False))


def ctc_loss_batch(items: Sequence[CtcItem]) -> tuple[float, list[CtcResult]]:
    if not items:
        raise EmptyDataset("empty batch")
    results: list[CtcResult] = []
    for index, item in enumerate(items):
        try:
            results.append(ctc_loss(item.logits, item.label, item.logit_len, item.label_len))
        except Infeasible as e:
            raise Infeasible(str(e), index=index) from e
    return float(np.mean([r.loss for r in results])), results


def best_path(logits: np.ndarray, logit_len: int | None = None) -> np.ndarray:
    """フレームごとの argmax を重複の畳み込みとブランク除去の後に返します。"""
    logits = np.asarray(logits)
    path = logits[: logit_len if logit_len is not None else logits.shape[0]].argmax(axis=-1)
    return collapse(path, logits.shape[-1] - 1)


def collapse(path: Sequence[int] | np.ndarray, blank: int) -> np.ndarray:
    path = np.asarray(path, dtype=np.int64)
    if path.size == 0:
        return path
    keep = np.ones(path.size, dtype=bool)
    keep[1:] = path[1:] != path[:-1]
    keep &= path != blank
    return path[keep]


def greedy_decode(logits: np.ndarray, logit_len: int | None = None, alphabet: str | None = None) -> str:
    logits = np.asarray(logits)
    symbols = alphabet if alphabet is not None else symbols_for(logits.shape[-1])
    return "".join(symbols[i] for i in best_path(logits, logit_len))


@cache
def _paths(frames: int, alphabet_size: int) -> tuple[np.ndarray, tuple[tuple[int, ...], ...]]:
    paths = np.array(list(itertools.product(range(alphabet_size), repeat=frames)), dtype=np.int64)
    blank = alphabet_size - 1
    labels = tuple(tuple(int(s) for s in collapse(p, blank)) for p in paths)
    paths.setflags(write=False)
    return paths, labels


def brute_force_distribution(logits: np.ndarray) -> dict[tuple[int, ...], float]:
    """全フレームパスを列挙し、縮約後のラベルごとの確率を返します (テスト用オラクル)。"""
    logits = np.asarray(logits, dtype=np.float64)
    frames, alphabet_size = logits.shape
    if frames > BRUTE_FORCE_MAX_FRAMES or alphabet_size > BRUTE_FORCE_MAX_SYMBOLS:
        raise BudgetExceeded(
            f"enumeration limited to T <= {BRUTE_FORCE_MAX_FRAMES}, A <= {BRUTE_FORCE_MAX_SYMBOLS}; "
            f"got T={frames}, A={alphabet_size}"
        )
    paths, labels = _paths(frames, alphabet_size)
    logp = log_softmax(logits)
    path_prob = np.exp(logp[np.arange(frames), paths].sum(axis=1))
    dist: dict[tuple[int, ...], float] = {}
    for label, p in zip(labels, path_prob):
        dist[label] = dist.get(label, 0.0) + float(p)
    return dist


def brute_force_ctc(logits: np.ndarray, label: Sequence[int] | np.ndarray) -> float:
    """ラベルに縮約されるパスが無ければ +inf を返します。"""
    p = brute_force_distribution(logits).get(tuple(int(s) for s in label), 0.0)
    return float(-np.log(p)) if p > 0.0 else float("inf")
