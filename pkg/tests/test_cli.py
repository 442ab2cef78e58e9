import json
from pathlib import Path

import numpy as np
import pytest

from sttpersonal.audio import AudioBuffer
from sttpersonal.cache import UtteranceCache
from sttpersonal.checkpoint import save_checkpoint
from sttpersonal.cli import build_parser, main
from sttpersonal.config import RunConfig
from sttpersonal.model import init_model

SMALL_RUN = """
[model]
conv_channels = [4]
conv_kernels = [[3, 3]]
num_blstm_layers = 1
blstm_units = 32
fc_units = 32

[training]
learning_rate = 1e-3
max_epochs = 10

[pretrain]
learning_rate = 3e-3

[synth]
mean_duration_s = 1.0
"""

COMMANDS = ("synth", "pretrain", "ingest", "personalize", "eval", "sweep", "featurize")


@pytest.fixture
def small_run(tmp_path) -> Path:
    path = tmp_path / "run.toml"
    path.write_text(SMALL_RUN, encoding="utf-8")
    return path


def _synth(tmp_path: Path, small_run: Path, voices: int = 2, utterances: int = 3) -> Path:
    data = tmp_path / "data"
    argv = ["synth", "--config", str(small_run), "--out", str(data), "--voices", str(voices), "--utterances", str(utterances)]
    assert main(argv) == 0
    return data


@pytest.mark.parametrize("command", [None, *COMMANDS])
def test_help(command, capsys):
    argv = ["--help"] if command is None else [command, "--help"]
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 0
    assert "usage:" in capsys.readouterr().out


def test_every_command_takes_the_global_options():
    parser = build_parser()
    for command in COMMANDS:
        extra = {
            "pretrain": ["--manifest", "m"],
            "ingest": ["--manifest", "m"],
            "personalize": ["--baseline", "b"],
            "eval": ["--checkpoint", "c", "--manifest", "m"],
            "sweep": ["--baseline", "b", "--manifest", "m", "--voice", "v"],
            "featurize": ["--manifest", "m"],
        }.get(command, [])
        args = parser.parse_args([command, *extra, "--seed", "3", "--log-level", "debug", "--out", "o"])
        assert (args.seed, args.log_level, args.out) == (3, "debug", Path("o"))


def test_missing_required_argument():
    with pytest.raises(SystemExit) as info:
        main(["personalize"])
    assert info.value.code == 2


def test_bad_config_exits_2(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[model]\nblstm_unit = 3\n", encoding="utf-8")
    assert main(["synth", "--config", str(path), "--out", str(tmp_path / "d")]) == 2


def test_personalize_on_a_cache_that_is_not_ready(tmp_path, capsys):
    cache = UtteranceCache(tmp_path / "cache")
    for i in range(3):
        cache.add_utterance(AudioBuffer(0.1 * np.random.default_rng(i).normal(size=8000)), "some words")
    code = main(["personalize", "--baseline", str(tmp_path / "none.epck"), "--cache", str(tmp_path / "cache"), "--out", str(tmp_path / "o")])
    assert code == 3
    err = capsys.readouterr().err
    assert "3 utterances" in err and "N=60" in err


def test_missing_checkpoint_exits_4(tmp_path, small_run):
    data = _synth(tmp_path, small_run)
    code = main(["eval", "--config", str(small_run), "--checkpoint", str(tmp_path / "none.epck"), "--manifest", str(data / "manifest.jsonl")])
    assert code == 4


def test_corrupt_checkpoint_exits_4(tmp_path, small_run, capsys):
    data = _synth(tmp_path, small_run)
    checkpoint = tmp_path / "bad.epck"
    save_checkpoint(init_model(RunConfig.load(small_run).model, 0), checkpoint)
    raw = bytearray(checkpoint.read_bytes())
    raw[20] = 0xFF
    checkpoint.write_bytes(bytes(raw))
    code = main(["eval", "--config", str(small_run), "--checkpoint", str(checkpoint), "--manifest", str(data / "manifest.jsonl")])
    assert code == 4
    assert "CRC32" in capsys.readouterr().err


def test_unexpected_failure_exits_4(tmp_path, monkeypatch, capsys):
    def broken(config, out_dir):
        raise RuntimeError("synthesizer crashed")

    monkeypatch.setattr("sttpersonal.cli.generate_corpus", broken)
    assert main(["synth", "--out", str(tmp_path / "d")]) == 4
    assert "RuntimeError: synthesizer crashed" in capsys.readouterr().err


def test_synth_writes_a_stamp(tmp_path, small_run):
    data = _synth(tmp_path, small_run, voices=2, utterances=3)
    assert len((data / "manifest.jsonl").read_text().splitlines()) == 6
    stamp = json.loads((data / "stamp.json").read_text())
    assert stamp["command"] == "synth"
    assert stamp["config"]["model"]["blstm_units"] == 32
    assert stamp["formats"]["checkpoint"] == 1


def test_seed_changes_the_corpus(tmp_path, small_run):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for out, seed in ((a, "1"), (b, "2")):
        assert main(["synth", "--config", str(small_run), "--out", str(out), "--voices", "1", "--utterances", "2", "--seed", seed]) == 0
    assert (a / "manifest.jsonl").read_text() != (b / "manifest.jsonl").read_text()


def test_featurize(tmp_path, small_run):
    data = _synth(tmp_path, small_run)
    out = tmp_path / "features"
    assert main(["featurize", "--manifest", str(data / "manifest.jsonl"), "--workers", "2", "--out", str(out)]) == 0
    with np.load(out / "features.npz") as npz:
        assert sorted(npz.files) == ["voice1-000", "voice1-001", "voice1-002", "voice2-000", "voice2-001", "voice2-002"]
        assert npz["voice1-000"].shape[1] == 80


def test_ingest_and_eval(tmp_path, small_run):
    data = _synth(tmp_path, small_run)
    cache_dir = tmp_path / "cache"
    argv = ["ingest", "--config", str(small_run), "--manifest", str(data / "manifest.jsonl"), "--cache", str(cache_dir)]
    assert main([*argv, "--voice", "voice2", "--limit", "2"]) == 0
    assert len(UtteranceCache(cache_dir)) == 2

    checkpoint = tmp_path / "init.epck"
    save_checkpoint(init_model(RunConfig.load(small_run).model, 0), checkpoint)
    out = tmp_path / "eval"
    argv = ["eval", "--config", str(small_run), "--checkpoint", str(checkpoint), "--manifest", str(data / "manifest.jsonl")]
    assert main([*argv, "--voice", "voice1", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert [item["id"] for item in report["items"]] == ["voice1-000", "voice1-001", "voice1-002"]


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_personalization_lowers_wer_for_a_held_out_voice(tmp_path, small_run, seed):
    common = ["--config", str(small_run), "--seed", str(seed)]
    data = tmp_path / "data"
    assert main(["synth", *common, "--out", str(data)]) == 0
    manifest = str(data / "manifest.jsonl")
    assert main(["pretrain", *common, "--manifest", manifest, "--epochs", "5", "--out", str(tmp_path / "pre")]) == 0
    cache_dir = str(tmp_path / "cache")
    assert main(["ingest", *common, "--manifest", manifest, "--cache", cache_dir, "--voice", "voice7"]) == 0

    out = tmp_path / "personal"
    baseline = str(tmp_path / "pre" / "baseline.epck")
    assert main(["personalize", *common, "--baseline", baseline, "--cache", cache_dir, "--out", str(out)]) == 0
    before = json.loads((out / "baseline_eval.json").read_text())["mean_wer"]
    after = json.loads((out / "personalized_eval.json").read_text())["mean_wer"]
    assert after < before
    assert (out / "personalized.epck").exists()
    assert len(UtteranceCache(cache_dir)) == 0
    speaker = json.loads((out / "speaker_report.json").read_text())
    assert speaker["mean_drop"] == pytest.approx(before - after)
