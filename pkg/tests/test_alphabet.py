import numpy as np
import pytest

from sttpersonal.alphabet import ALPHABET, ALPHABET_SIZE, BLANK, decode, encode, normalize_transcript, symbols_for
from sttpersonal.errors import BadTranscript, LabelError


def test_blank_is_last_index():
    assert ALPHABET_SIZE == 29
    assert BLANK == ALPHABET_SIZE - 1


@pytest.mark.parametrize(
    "raw, expected",
    [
        ("Hello, WORLD", "hello world"),
        ("  don't   stop!  ", "don't stop"),
        ("well-known", "well known"),
        ("a\tb\nc", "a b c"),
        ("", ""),
    ],
)
def test_normalize_transcript(raw, expected):
    assert normalize_transcript(raw) == expected


def test_normalize_rejects_digits():
    with pytest.raises(BadTranscript) as info:
        normalize_transcript("call 3 times")
    assert info.value.offending == ("3",)


def test_normalize_reports_every_offending_character():
    with pytest.raises(BadTranscript) as info:
        normalize_transcript("naïve 42")
    assert info.value.offending == ("2", "4", "ï")


def test_encode_decode():
    label = encode("hi 'a")
    np.testing.assert_array_equal(label, [7, 8, 26, 27, 0])
    assert label.dtype == np.int64
    assert decode(label) == "hi 'a"


def test_encode_rejects_unknown_character():
    with pytest.raises(LabelError):
        encode("A")


def test_symbols_for():
    assert symbols_for(ALPHABET_SIZE) == ALPHABET
    assert symbols_for(3) == "ab"
    assert len(symbols_for(40)) == 39
