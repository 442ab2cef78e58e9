import numpy as np
import pytest

from sttpersonal.audio import (
    CLEAN,
    LOG_FLOOR,
    N_MELS,
    AudioBuffer,
    augment_noise,
    frame_signal,
    log_mel,
    measured_snr_db,
    mel_centers_hz,
    mel_filterbank,
)
from sttpersonal.errors import BadAudio, SilentSignal, TooShort
from sttpersonal.wavfile import SAMPLE_RATE, write_wav


def _tone(hz: float, seconds: float = 1.0) -> AudioBuffer:
    t = np.arange(int(seconds * SAMPLE_RATE)) / SAMPLE_RATE
    return AudioBuffer(0.5 * np.sin(2.0 * np.pi * hz * t))


@pytest.mark.parametrize("n, frames", [(16000, 61), (512, 1), (767, 1), (768, 2)])
def test_frame_count(n, frames):
    assert frame_signal(AudioBuffer(np.zeros(n))).shape == (frames, 512)


def test_too_short():
    with pytest.raises(TooShort):
        frame_signal(AudioBuffer(np.zeros(511)))


def test_silence_hits_the_floor():
    features = log_mel(AudioBuffer(np.zeros(SAMPLE_RATE)))
    assert features.frames.shape == (61, N_MELS)
    np.testing.assert_allclose(features.frames, np.log(LOG_FLOOR))


def test_tone_peaks_in_the_bracketing_bin():
    frames = log_mel(_tone(1000.0)).frames
    centers = mel_centers_hz()
    for peak in frames.argmax(axis=1):
        assert centers[peak - 1] <= 1000.0 <= centers[peak + 1]


def test_filterbank_shape_and_peak():
    bank = mel_filterbank()
    assert bank.shape == (257, N_MELS)
    assert bank.max() <= 1.0
    assert np.all(bank.max(axis=0) > 0.0)


def test_log_mel_is_deterministic():
    audio = _tone(440.0)
    np.testing.assert_array_equal(log_mel(audio).frames, log_mel(audio).frames)


def test_from_wav(tmp_path):
    path = tmp_path / "tone.wav"
    write_wav(path, _tone(500.0).samples)
    audio = AudioBuffer.from_wav(path)
    assert audio.num_samples == SAMPLE_RATE
    assert audio.duration_s == pytest.approx(1.0)


def test_audio_buffer_validation():
    with pytest.raises(BadAudio):
        AudioBuffer(np.zeros((2, 10)))
    with pytest.raises(BadAudio):
        AudioBuffer(np.zeros(10), 8000)
    with pytest.raises(BadAudio):
        AudioBuffer(np.array([0.0, np.nan]))


def test_clean_noise_is_identity():
    audio = _tone(300.0)
    assert augment_noise(audio, CLEAN, seed=0) is audio


@pytest.mark.parametrize("snr_db", [0.0, 10.0, 30.0])
def test_noise_reaches_target_snr(snr_db):
    audio = _tone(300.0)
    noisy = augment_noise(audio, snr_db, seed=1)
    assert measured_snr_db(audio, noisy) == pytest.approx(snr_db, abs=10.0 * np.log10(1.05))


def test_noise_is_seeded():
    audio = _tone(300.0)
    np.testing.assert_array_equal(augment_noise(audio, 5.0, 7).samples, augment_noise(audio, 5.0, 7).samples)
    assert not np.array_equal(augment_noise(audio, 5.0, 7).samples, augment_noise(audio, 5.0, 8).samples)


def test_noise_on_silence():
    with pytest.raises(SilentSignal):
        augment_noise(AudioBuffer(np.zeros(1000)), 10.0, seed=0)
