"""文字集合とトランスクリプトの正規化。

ブランクは常に最後のインデックス (``alphabet_size - 1``) です。
"""

import re
from typing import Final, Sequence

import numpy as np

from .errors import BadTranscript, LabelError

ALPHABET: Final = "abcdefghijklmnopqrstuvwxyz '"
ALPHABET_SIZE: Final = len(ALPHABET) + 1
BLANK: Final = len(ALPHABET)

# 黙って取り除く句読点。ハイフンは空白になります。
_DROPPED_PUNCTUATION: Final = frozenset('.,!?;:"()')
_WHITESPACE_RE: Final = re.compile(r"\s+")
_INDEX: Final = {c: i for i, c in enumerate(ALPHABET)}


def normalize_transcript(text: str) -> str:
    """小文字化、句読点除去、空白の畳み込みを行います。

    アルファベット外の文字 (数字など) が残った場合は :class:`BadTranscript` を送出します。
    """
    lowered = text.lower().replace("-", " ")
    offending = [c for c in lowered if c not in _INDEX and c not in _DROPPED_PUNCTUATION and not c.isspace()]
    if offending:
        raise BadTranscript(offending)
    kept = "".join(c if c in _INDEX else " " for c in lowered if c not in _DROPPED_PUNCTUATION)
    return _WHITESPACE_RE.sub(" ", kept).strip()


def encode(text: str) -> np.ndarray:
    try:
        return np.fromiter((_INDEX[c] for c in text), dtype=np.int64, count=len(text))
    except KeyError as e:
        raise LabelError(f"character {e.args[0]!r} is not in the alphabet") from None


def decode(indices: Sequence[int] | np.ndarray, alphabet: str = ALPHABET) -> str:
    return "".join(alphabet[i] for i in indices)


def symbols_for(alphabet_size: int) -> str:
    """``alphabet_size`` (ブランク込み) に対応する表示用文字列を返します。"""
    if alphabet_size - 1 <= len(ALPHABET):
        return ALPHABET[: alphabet_size - 1]
    return "".join(chr(0x100 + i) for i in range(alphabet_size - 1))
