"""int8対称量子化とチェックポイントファイル (Save / Load)。

レイアウト (リトルエンディアン)::

    "EPCK" | u16 version | u64 config hash | u32 tensor count
    tensor* : u16 name length | name (UTF-8) | u8 group | u8 rank | u32 dims[rank] | f32 scale | int8 payload
    u32 CRC32 (先行する全バイト)
"""

import logging
import math
import os
import zlib
from ctypes import LittleEndianStructure, c_char, c_float, c_uint8, c_uint16, c_uint32, c_uint64, sizeof
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Final

import numpy as np

from .errors import (
    BadMagic,
    CheckpointIOError,
    ChecksumMismatch,
    ConfigMismatch,
    NonFinite,
    ShapeMismatch,
    TruncatedFile,
    VersionMismatch,
)
from .model import ModelConfig, ParamGroup, ParamSet, param_shapes

_logger = logging.getLogger(__name__)

MAGIC: Final = b"EPCK"
FORMAT_VERSION: Final = 1
QMAX: Final = 127
# スケールの仮数部のビット数。int8 (7ビット) との積がfloat32 (24ビット) で正確になります。
SCALE_SIGNIFICAND_BITS: Final = 16


class CheckpointHeader(LittleEndianStructure):
    __slots__ = ()
    _pack_ = 1
    _layout_ = "ms"
    _fields_ = (
        ("magic", c_char * 4),
        ("version", c_uint16),
        ("config_hash", c_uint64),
        ("count", c_uint32),
    )

    if TYPE_CHECKING:
        magic: bytes
        version: int
        config_hash: int
        count: int


class TensorTag(LittleEndianStructure):
    __slots__ = ()
    _fields_ = (
        ("group", c_uint8),
        ("rank", c_uint8),
    )

    if TYPE_CHECKING:
        group: int
        rank: int


@dataclass(frozen=True)
class QuantTensor:
    name: str
    shape: tuple[int, ...]
    scale: float
    values: np.ndarray
    group: ParamGroup = ParamGroup.FC

    def __post_init__(self) -> None:
        if self.scale <= 0.0:
            raise ValueError("scale must be positive")
        if self.values.dtype != np.int8 or self.values.shape != self.shape:
            raise ShapeMismatch(f"{self.name}: int8 payload of shape {self.shape} required")


@dataclass(frozen=True)
class Checkpoint:
    config_hash: int
    tensors: tuple[QuantTensor, ...]
    format_version: int = FORMAT_VERSION
    # オプティマイザの状態は保存しません。
    has_optimizer_state: bool = False


def quantization_scale(max_abs: float) -> float:
    """``max_abs / 127`` を仮数部16ビットに切り上げた値。``max_abs == 0`` なら1。"""
    if max_abs == 0.0:
        return 1.0
    mantissa, exponent = np.frexp(max_abs / QMAX)
    unit = float(1 << SCALE_SIGNIFICAND_BITS)
    return float(np.ldexp(np.ceil(mantissa * unit) / unit, exponent))


def quantize_tensor(t: np.ndarray, name: str = "", group: ParamGroup = ParamGroup.FC) -> QuantTensor:
    x = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFinite(f"{name or 'tensor'} contains non-finite values")
    scale = quantization_scale(float(np.max(np.abs(x))) if x.size else 0.0)
    y = x / scale
    # 0から遠い方へ丸めます。
    q = np.clip(np.sign(y) * np.floor(np.abs(y) + 0.5), -QMAX, QMAX).astype(np.int8)
    return QuantTensor(name, x.shape, scale, q, group)


def dequantize_tensor(qt: QuantTensor, dtype: str | np.dtype = np.float32) -> np.ndarray:
    dtype = np.dtype(dtype)
    return qt.values.astype(dtype) * dtype.type(qt.scale)


def to_checkpoint(params: ParamSet) -> Checkpoint:
    if not len(params):
        raise ShapeMismatch("cannot checkpoint an empty parameter set")
    tensors = tuple(quantize_tensor(t, name, params.group_of(name)) for name, t in params.items())
    return Checkpoint(params.config.hash64, tensors)


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    header = CheckpointHeader(MAGIC, checkpoint.format_version, checkpoint.config_hash, len(checkpoint.tensors))
    parts = [bytes(header)]
    for qt in checkpoint.tensors:
        name = qt.name.encode("utf-8")
        parts.append(bytes(c_uint16(len(name))))
        parts.append(name)
        parts.append(bytes(TensorTag(int(qt.group), len(qt.shape))))
        parts.append(bytes((c_uint32 * len(qt.shape))(*qt.shape)))
        parts.append(bytes(c_float(qt.scale)))
        parts.append(np.ascontiguousarray(qt.values).tobytes())
    body = b"".join(parts)
    return body + bytes(c_uint32(zlib.crc32(body)))


class _Reader:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedFile(f"need {n} bytes at offset {self.pos}, file has {len(self.data)}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk


def decode_checkpoint(data: bytes, expected_config: ModelConfig | None = None) -> Checkpoint:
    if len(data) < len(MAGIC):
        raise TruncatedFile(f"{len(data)} bytes, shorter than the magic")
    if data[: len(MAGIC)] != MAGIC:
        raise BadMagic(f"magic is {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    reader = _Reader(data)
    header = CheckpointHeader.from_buffer_copy(reader.take(sizeof(CheckpointHeader)))
    if header.version != FORMAT_VERSION:
        raise VersionMismatch(f"format version {header.version}, this build reads {FORMAT_VERSION}")
    if expected_config is not None and header.config_hash != expected_config.hash64:
        raise ConfigMismatch(
            f"checkpoint config hash {header.config_hash:016x} does not match {expected_config.hash64:016x}"
        )

    # 構造だけを読んでからCRCを照合し、名前と値の解釈はその後に行います。
    records: list[tuple[bytes, TensorTag, tuple[int, ...], float, bytes]] = []
    for _ in range(header.count):
        name_len = c_uint16.from_buffer_copy(reader.take(sizeof(c_uint16))).value
        name = reader.take(name_len)
        tag = TensorTag.from_buffer_copy(reader.take(sizeof(TensorTag)))
        dims = tuple((c_uint32 * tag.rank).from_buffer_copy(reader.take(sizeof(c_uint32) * tag.rank))) if tag.rank else ()
        scale = c_float.from_buffer_copy(reader.take(sizeof(c_float))).value
        payload = reader.take(math.prod(dims))
        records.append((name, tag, dims, float(scale), payload))

    body_end = reader.pos
    crc = c_uint32.from_buffer_copy(reader.take(sizeof(c_uint32))).value
    if crc != zlib.crc32(data[:body_end]):
        raise ChecksumMismatch("CRC32 of the checkpoint body does not match its trailer")

    tensors: list[QuantTensor] = []
    for n, (name, tag, dims, scale, payload) in enumerate(records):
        try:
            values = np.frombuffer(payload, dtype=np.int8).reshape(dims).copy()
            tensors.append(QuantTensor(name.decode("utf-8"), dims, scale, values, ParamGroup(tag.group)))
        except (UnicodeDecodeError, ValueError) as e:
            raise ChecksumMismatch(f"tensor record {n} is malformed: {e}") from e
    return Checkpoint(header.config_hash, tuple(tensors), header.version)


def from_checkpoint(checkpoint: Checkpoint, config: ModelConfig) -> ParamSet:
    tensors = {qt.name: dequantize_tensor(qt, config.np_dtype) for qt in checkpoint.tensors}
    try:
        return ParamSet.from_config(config, tensors)
    except ShapeMismatch as e:
        raise ConfigMismatch(str(e)) from e


def save_checkpoint(params: ParamSet, path: str | Path) -> None:
    """量子化して書き込みます。一時ファイルにfsyncしてから置き換えます。"""
    path = Path(path)
    data = encode_checkpoint(to_checkpoint(params))
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointIOError(path, e) from e
    _logger.info("saved checkpoint %s (%d tensors, %d bytes)", path, len(params), len(data))


def load_checkpoint(path: str | Path, expected_config: ModelConfig) -> ParamSet:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointIOError(path, e) from e
    return from_checkpoint(decode_checkpoint(data, expected_config), expected_config)


def checkpoint_size(config: ModelConfig) -> int:
    """チェックポイントのバイト数を形状から求めます。"""
    size = sizeof(CheckpointHeader) + sizeof(c_uint32)
    for name, shape, _ in param_shapes(config):
        size += sizeof(c_uint16) + len(name.encode("utf-8")) + sizeof(TensorTag)
        size += sizeof(c_uint32) * len(shape) + sizeof(c_float) + int(np.prod(shape))
    return size
