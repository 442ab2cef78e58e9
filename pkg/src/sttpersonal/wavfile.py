"""RIFF/WAVE (PCM16, モノラル, 16 kHz) の読み書き。"""

import os
from ctypes import LittleEndianStructure, c_char, c_uint16, c_uint32, sizeof
from pathlib import Path
from typing import TYPE_CHECKING, Final

import numpy as np

from .errors import BadAudio

SAMPLE_RATE: Final = 16000
WAVE_FORMAT_PCM: Final = 0x0001
PCM16_FULL_SCALE: Final = 32767.0


class RiffHeader(LittleEndianStructure):
    """RIFFヘッダー。"""

    __slots__ = ()
    _fields_ = (
        ("riff", c_char * 4),
        ("size", c_uint32),
        ("wave", c_char * 4),
    )

    if TYPE_CHECKING:
        riff: bytes
        size: int
        wave: bytes


class ChunkHeader(LittleEndianStructure):
    __slots__ = ()
    _fields_ = (
        ("id", c_char * 4),
        ("size", c_uint32),
    )

    if TYPE_CHECKING:
        id: bytes
        size: int


class FormatChunk(LittleEndianStructure):
    """fmtチャンクの本体 (WAVEFORMAT + wBitsPerSample)。"""

    __slots__ = ()
    _fields_ = (
        ("format_tag", c_uint16),
        ("channels", c_uint16),
        ("sample_rate", c_uint32),
        ("byte_rate", c_uint32),
        ("block_align", c_uint16),
        ("bits_per_sample", c_uint16),
    )

    if TYPE_CHECKING:
        format_tag: int
        channels: int
        sample_rate: int
        byte_rate: int
        block_align: int
        bits_per_sample: int

    @staticmethod
    def pcm16_mono() -> "FormatChunk":
        fmt = FormatChunk()
        fmt.format_tag = WAVE_FORMAT_PCM
        fmt.channels = 1
        fmt.sample_rate = SAMPLE_RATE
        fmt.byte_rate = SAMPLE_RATE * 2
        fmt.block_align = 2
        fmt.bits_per_sample = 16
        return fmt


def parse_wav(data: bytes, source: str = "<bytes>") -> np.ndarray:
    """WAVバイト列をfloat64のサンプル列 ([-1, 1]) に変換します。"""
    if len(data) < sizeof(RiffHeader):
        raise BadAudio(f"{source}: file too short for a RIFF header")
    riff = RiffHeader.from_buffer_copy(data)
    if riff.riff != b"RIFF":
        raise BadAudio(f"{source}: container is {riff.riff!r}, expected RIFF")
    if riff.wave != b"WAVE":
        raise BadAudio(f"{source}: form type is {riff.wave!r}, expected WAVE")

    fmt: FormatChunk | None = None
    payload: bytes | None = None
    pos = sizeof(RiffHeader)
    while pos + sizeof(ChunkHeader) <= len(data):
        chunk = ChunkHeader.from_buffer_copy(data, pos)
        body = pos + sizeof(ChunkHeader)
        if body + chunk.size > len(data):
            raise BadAudio(f"{source}: chunk {chunk.id!r} runs past end of file")
        match chunk.id:
            case b"fmt ":
                if chunk.size < sizeof(FormatChunk):
                    raise BadAudio(f"{source}: fmt chunk is {chunk.size} bytes")
                fmt = FormatChunk.from_buffer_copy(data, body)
            case b"data":
                payload = data[body : body + chunk.size]
        pos = body + chunk.size + (chunk.size & 1)

    if fmt is None:
        raise BadAudio(f"{source}: missing fmt chunk")
    if payload is None:
        raise BadAudio(f"{source}: missing data chunk")
    if fmt.format_tag != WAVE_FORMAT_PCM:
        raise BadAudio(f"{source}: format tag 0x{fmt.format_tag:04x} is not PCM")
    if fmt.channels != 1:
        raise BadAudio(f"{source}: {fmt.channels} channels, expected mono")
    if fmt.sample_rate != SAMPLE_RATE:
        raise BadAudio(f"{source}: sample rate {fmt.sample_rate} Hz, expected {SAMPLE_RATE}")
    if fmt.bits_per_sample != 16:
        raise BadAudio(f"{source}: {fmt.bits_per_sample} bits per sample, expected 16")
    if len(payload) % 2:
        raise BadAudio(f"{source}: data chunk has odd length {len(payload)}")

    return np.frombuffer(payload, dtype="<i2").astype(np.float64) / PCM16_FULL_SCALE


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0) * PCM16_FULL_SCALE
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype("<i2")


def wav_bytes(samples: np.ndarray) -> bytes:
    pcm = to_pcm16(samples).tobytes()
    fmt = FormatChunk.pcm16_mono()
    riff = RiffHeader()
    riff.riff = b"RIFF"
    riff.wave = b"WAVE"
    riff.size = 4 + 2 * sizeof(ChunkHeader) + sizeof(FormatChunk) + len(pcm) + (len(pcm) & 1)
    fmt_header = ChunkHeader(b"fmt ", sizeof(FormatChunk))
    data_header = ChunkHeader(b"data", len(pcm))
    pad = b"\0" if len(pcm) & 1 else b""
    return bytes(riff) + bytes(fmt_header) + bytes(fmt) + bytes(data_header) + pcm + pad


def read_wav(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise BadAudio(f"{path}: {e.strerror or e}") from e
    return parse_wav(data, str(path))


def write_wav(path: str | Path, samples: np.ndarray) -> None:
    """一時ファイルに書き込んでから置き換えます。"""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(wav_bytes(samples))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
