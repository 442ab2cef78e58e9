import numpy as np
import pytest

from sttpersonal.audio import AudioBuffer, log_mel
from sttpersonal.dataset import (
    ManifestEntry,
    Sample,
    batches,
    by_voice,
    featurize_many,
    read_manifest,
    write_manifest,
)
from sttpersonal.errors import BadTranscript, ConfigError


def _audio(seed: int) -> AudioBuffer:
    return AudioBuffer(0.1 * np.random.default_rng(seed).normal(size=4000))


def test_manifest_paths_are_relative_to_the_manifest(tmp_path):
    entries = [ManifestEntry(tmp_path / "v" / "a.wav", "one", "a", "v", 1.23456)]
    write_manifest(tmp_path / "m.jsonl", entries)
    assert '"audio": "v/a.wav"' in (tmp_path / "m.jsonl").read_text()
    (loaded,) = read_manifest(tmp_path / "m.jsonl")
    assert loaded.audio == tmp_path / "v" / "a.wav"
    assert loaded.dur_s == pytest.approx(1.2346)


def test_manifest_defaults_id_to_stem(tmp_path):
    (tmp_path / "m.jsonl").write_text('{"audio": "x/clip.wav", "text": "hi"}\n\n')
    (entry,) = read_manifest(tmp_path / "m.jsonl")
    assert entry.id == "clip"
    assert entry.voice is None


def test_bad_manifest_line(tmp_path):
    (tmp_path / "m.jsonl").write_text('{"text": "no audio"}\n')
    with pytest.raises(ConfigError, match=":1:"):
        read_manifest(tmp_path / "m.jsonl")


def test_sample_from_audio():
    sample = Sample.from_audio("a", _audio(0), "Hi There")
    assert sample.text == "hi there"
    np.testing.assert_array_equal(sample.label, [7, 8, 26, 19, 7, 4, 17, 4])
    assert sample.num_frames == 14


def test_sample_rejects_digits():
    with pytest.raises(BadTranscript):
        Sample.from_audio("a", _audio(0), "route 66")


def test_featurize_many_keeps_order():
    items = [(f"u{i}", _audio(i), "x", None) for i in range(6)]
    samples = featurize_many(items, max_workers=3)
    assert [s.id for s in samples] == [f"u{i}" for i in range(6)]
    np.testing.assert_array_equal(samples[4].features, log_mel(_audio(4)).frames)
    assert featurize_many([]) == []


def test_batches_keep_the_short_tail():
    samples = [Sample.from_audio(f"u{i}", _audio(i), "x") for i in range(5)]
    assert [len(b) for b in batches(samples, 2)] == [2, 2, 1]
    order = np.array([4, 3, 2, 1, 0])
    assert [s.id for s in next(batches(samples, 2, order))] == ["u4", "u3"]


def test_by_voice():
    entries = [ManifestEntry(f"{i}.wav", "x", str(i), "v1" if i % 2 else "v2") for i in range(4)]
    grouped = by_voice(entries)
    assert [e.id for e in grouped["v1"]] == ["1", "3"]
    assert [e.id for e in grouped["v2"]] == ["0", "2"]
