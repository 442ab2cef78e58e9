import struct

import numpy as np
import pytest

from sttpersonal.errors import BadAudio
from sttpersonal.wavfile import PCM16_FULL_SCALE, SAMPLE_RATE, parse_wav, read_wav, to_pcm16, wav_bytes, write_wav


def _wav(format_tag=1, channels=1, rate=SAMPLE_RATE, bits=16, payload=b"\0\0" * 4):
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", format_tag, channels, rate, rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_write_read(tmp_path):
    samples = np.array([0.0, 0.5, -0.5, 1.0, -1.0])
    path = tmp_path / "x.wav"
    write_wav(path, samples)
    np.testing.assert_allclose(read_wav(path), samples, atol=1.0 / PCM16_FULL_SCALE)
    assert not (tmp_path / "x.wav.tmp").exists()


def test_header_layout():
    data = wav_bytes(np.zeros(3))
    assert data[:4] == b"RIFF"
    assert struct.unpack_from("<I", data, 4)[0] == len(data) - 8
    assert data[8:12] == b"WAVE"


def test_to_pcm16_clips_and_rounds():
    np.testing.assert_array_equal(to_pcm16(np.array([2.0, -2.0, 0.0])), [32767, -32767, 0])


def test_parse_minimal_file():
    assert parse_wav(_wav()).shape == (4,)


@pytest.mark.parametrize(
    "kwargs, word",
    [
        ({"channels": 2}, "mono"),
        ({"rate": 8000}, "sample rate"),
        ({"bits": 8, "payload": b"\0" * 4}, "bits per sample"),
        ({"format_tag": 3}, "not PCM"),
    ],
)
def test_parse_rejects_unsupported_formats(kwargs, word):
    with pytest.raises(BadAudio, match=word):
        parse_wav(_wav(**kwargs))


def test_parse_rejects_truncated_data():
    with pytest.raises(BadAudio, match="past end"):
        parse_wav(_wav()[:-2])


def test_read_missing_file(tmp_path):
    with pytest.raises(BadAudio):
        read_wav(tmp_path / "missing.wav")
