from ctypes import sizeof

import numpy as np
import pytest

from sttpersonal.checkpoint import (
    FORMAT_VERSION,
    CheckpointHeader,
    MAGIC,
    QMAX,
    checkpoint_size,
    decode_checkpoint,
    dequantize_tensor,
    encode_checkpoint,
    load_checkpoint,
    quantization_scale,
    quantize_tensor,
    save_checkpoint,
    to_checkpoint,
)
from sttpersonal.errors import (
    BadMagic,
    CheckpointIOError,
    ChecksumMismatch,
    ConfigMismatch,
    NonFinite,
    ShapeMismatch,
    SttError,
    TruncatedFile,
    VersionMismatch,
)
from sttpersonal.model import ModelConfig, ParamSet, init_model
from sttpersonal.trainer import TrainingConfig, predict, run_pretraining


def test_zero_tensor():
    qt = quantize_tensor(np.zeros((3, 4)))
    assert qt.scale == 1.0
    np.testing.assert_array_equal(qt.values, 0)
    np.testing.assert_array_equal(dequantize_tensor(qt), 0.0)


def test_unit_range_scale():
    qt = quantize_tensor(np.linspace(-1.0, 1.0, 11))
    assert qt.scale == pytest.approx(1.0 / 127.0, rel=1e-4)
    assert qt.scale >= 1.0 / 127.0
    assert qt.values[-1] == 127
    assert qt.values[0] == -127
    assert dequantize_tensor(qt)[-1] == pytest.approx(1.0, rel=1e-4)


def test_scale_has_a_short_significand():
    scale = quantization_scale(0.123456789)
    assert scale >= 0.123456789 / QMAX
    mantissa, _ = np.frexp(scale)
    assert float(mantissa * 2**16).is_integer()


def test_roundtrip_error_is_within_half_a_step():
    x = np.random.default_rng(0).normal(size=(50, 20))
    qt = quantize_tensor(x)
    np.testing.assert_array_less(np.abs(dequantize_tensor(qt, np.float64) - x), qt.scale / 2 + 1e-12)


def test_requantization_is_a_fixed_point():
    qt = quantize_tensor(np.random.default_rng(1).normal(size=100))
    again = quantize_tensor(dequantize_tensor(qt, np.float64))
    np.testing.assert_array_equal(again.values, qt.values)


def test_non_finite_tensor():
    with pytest.raises(NonFinite):
        quantize_tensor(np.array([1.0, np.inf]))


def test_save_load(tmp_path, tiny_config):
    params = init_model(tiny_config, 0)
    path = tmp_path / "m.epck"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path, tiny_config)
    assert loaded.names == params.names
    for name, t in params.items():
        scale = quantize_tensor(t).scale
        assert np.max(np.abs(loaded[name] - t)) <= scale / 2 + 1e-12
    assert path.stat().st_size == checkpoint_size(tiny_config)


def test_files_are_byte_identical(tmp_path, tiny_config):
    params = init_model(tiny_config, 0)
    save_checkpoint(params, tmp_path / "a.epck")
    save_checkpoint(params, tmp_path / "b.epck")
    assert (tmp_path / "a.epck").read_bytes() == (tmp_path / "b.epck").read_bytes()


def test_empty_params(tiny_config):
    with pytest.raises(ShapeMismatch):
        to_checkpoint(ParamSet(tiny_config, {}, {}))


def test_header():
    data = encode_checkpoint(to_checkpoint(init_model(ModelConfig(dtype="float64", blstm_units=4), 0)))
    assert data[:4] == MAGIC
    assert int.from_bytes(data[4:6], "little") == FORMAT_VERSION


def test_bad_magic(tiny_config):
    data = bytearray(encode_checkpoint(to_checkpoint(init_model(tiny_config, 0))))
    data[0:4] = b"NOPE"
    with pytest.raises(BadMagic):
        decode_checkpoint(bytes(data))


def test_version_mismatch(tiny_config):
    data = bytearray(encode_checkpoint(to_checkpoint(init_model(tiny_config, 0))))
    data[4:6] = (FORMAT_VERSION + 1).to_bytes(2, "little")
    with pytest.raises(VersionMismatch):
        decode_checkpoint(bytes(data))


def test_config_mismatch(tmp_path, tiny_config):
    path = tmp_path / "m.epck"
    save_checkpoint(init_model(tiny_config, 0), path)
    with pytest.raises(ConfigMismatch):
        load_checkpoint(path, ModelConfig(**{**tiny_config.__dict__, "blstm_units": 4}))


def test_flipped_payload_byte(tiny_config):
    data = bytearray(encode_checkpoint(to_checkpoint(init_model(tiny_config, 0))))
    # fc2.b の量子化値の1バイト
    data[-6] ^= 0xFF
    with pytest.raises(ChecksumMismatch):
        decode_checkpoint(bytes(data))


def test_flipped_name_byte(tiny_config):
    data = bytearray(encode_checkpoint(to_checkpoint(init_model(tiny_config, 0))))
    # 先頭テンソルの名前の1文字目
    data[sizeof(CheckpointHeader) + 2] = 0xFF
    with pytest.raises(ChecksumMismatch):
        decode_checkpoint(bytes(data))


def test_every_single_byte_corruption_is_a_domain_error(tiny_config):
    data = encode_checkpoint(to_checkpoint(init_model(tiny_config, 0)))
    for n in range(len(data)):
        corrupt = bytearray(data)
        corrupt[n] ^= 0xFF
        with pytest.raises(SttError):
            decode_checkpoint(bytes(corrupt), tiny_config)


def test_every_truncation_fails(tiny_config):
    data = encode_checkpoint(to_checkpoint(init_model(tiny_config, 0)))
    for n in range(len(data)):
        with pytest.raises(TruncatedFile):
            decode_checkpoint(data[:n])


def test_missing_file(tmp_path, tiny_config):
    with pytest.raises(CheckpointIOError) as info:
        load_checkpoint(tmp_path / "missing.epck", tiny_config)
    assert isinstance(info.value, SttError)
    assert info.value.path == tmp_path / "missing.epck"


@pytest.mark.slow
def test_quantization_keeps_transcripts(tmp_path, small_config, short_samples):
    config = TrainingConfig(batch_size=5, learning_rate=3e-3)
    params, _ = run_pretraining(init_model(small_config, 0), short_samples["voice2"], config, 5)
    validation = short_samples["voice1"][:20]
    save_checkpoint(params, tmp_path / "m.epck")
    loaded = load_checkpoint(tmp_path / "m.epck", small_config)
    changed = sum(predict(params, s.features) != predict(loaded, s.features) for s in validation)
    assert changed <= 1
