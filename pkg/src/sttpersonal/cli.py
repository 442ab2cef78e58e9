"""コマンドライン: synth, pretrain, ingest, personalize, eval, sweep, featurize。

終了コードは 0 成功、2 引数・設定の誤り、3 前提条件の不成立 (キャッシュ未充足など)、
4 実行時の失敗です。
"""

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Final, Sequence

import numpy as np

from . import __version__
from .audio import AudioBuffer
from .bench import personalization_runner, run_sweep
from .cache import UtteranceCache
from .checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from .config import RunConfig
from .dataset import ManifestEntry, Sample, featurize_many, load_samples, read_manifest
from .errors import EmptyDataset, SttError
from .evaluation import SpeakerReport, SpeakerResult, evaluate_set
from .model import init_model
from .synth import generate_corpus
from .trainer import run_personalization, run_pretraining

_logger = logging.getLogger(__name__)

LOG_LEVELS: Final = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
LOG_FORMAT: Final = "%(asctime)s %(levelname)s %(name)s: %(message)s"
MANIFEST_FORMAT_VERSION: Final = 1

EXIT_OK: Final = 0
EXIT_RUNTIME: Final = 4


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    group = common.add_argument_group("global options")
    group.add_argument("--config", type=Path, help="TOML or JSON run configuration")
    group.add_argument("--seed", type=int, help="override every seed in the configuration")
    group.add_argument("--out", type=Path, help="output directory")
    group.add_argument("--log-level", choices=tuple(LOG_LEVELS), default="info", help="logging verbosity")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="sttpersonal", description="On-device speech recognizer personalization")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parents=[common], help="synthesize a multi-voice corpus")
    p.add_argument("--voices", type=int, help="number of voices")
    p.add_argument("--utterances", type=int, help="utterances per voice")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("pretrain", parents=[common], help="train a baseline checkpoint")
    p.add_argument("--manifest", type=Path, required=True, help="corpus manifest (JSON lines)")
    p.add_argument("--epochs", type=int, help="pretraining epochs")
    p.add_argument("--voices", help="comma-separated voices to train on")
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("ingest", parents=[common], help="add manifest utterances to a cache")
    p.add_argument("--manifest", type=Path, required=True, help="manifest to ingest")
    p.add_argument("--cache", type=Path, help="cache root (default: cache.root)")
    p.add_argument("--voice", help="only ingest this voice")
    p.add_argument("--limit", type=int, help="ingest at most this many utterances")
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("personalize", parents=[common], help="fine-tune a baseline on the cached utterances")
    p.add_argument("--baseline", type=Path, required=True, help="baseline checkpoint")
    p.add_argument("--cache", type=Path, help="cache root (default: cache.root)")
    p.add_argument("--keep-cache", action="store_true", help="do not clear the cache after training")
    p.set_defaults(handler=cmd_personalize)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", type=Path, required=True, help="checkpoint to evaluate")
    p.add_argument("--manifest", type=Path, required=True, help="evaluation manifest")
    p.add_argument("--voice", help="only evaluate this voice")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="profile a hyperparameter grid")
    p.add_argument("--baseline", type=Path, required=True, help="baseline checkpoint")
    p.add_argument("--manifest", type=Path, required=True, help="corpus manifest")
    p.add_argument("--voice", required=True, help="voice whose utterances are used")
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("featurize", parents=[common], help="compute log-mel features into an .npz file")
    p.add_argument("--manifest", type=Path, required=True, help="manifest to featurize")
    p.add_argument("--workers", type=int, help="featurization threads")
    p.set_defaults(handler=cmd_featurize)
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.load(args.config) if args.config is not None else RunConfig()
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return config


def out_dir(args: argparse.Namespace, config: RunConfig, default: str) -> Path:
    path = args.out if args.out is not None else Path(config.paths.out) / default
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_stamp(path: Path, command: str, config: RunConfig, argv: Sequence[str]) -> None:
    """出力の再現に必要な設定・シード・形式のバージョンを書きます。"""
    stamp = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "config": config.to_dict(),
        "seeds": {
            "training": config.training.seed,
            "synth": config.synth.seed,
            "pretrain": config.pretrain.seed,
            "sweep": config.sweep.seed,
            "cache": config.cache.seed,
        },
        "formats": {"checkpoint": FORMAT_VERSION, "manifest": MANIFEST_FORMAT_VERSION},
    }
    (path / "stamp.json").write_text(json.dumps(stamp, indent=2), encoding="utf-8")


def select_voices(entries: Sequence[ManifestEntry], voices: Sequence[str] | None) -> list[ManifestEntry]:
    if not voices:
        return list(entries)
    wanted = set(voices)
    return [e for e in entries if e.voice in wanted]


def cmd_synth(args: argparse.Namespace, config: RunConfig) -> Path:
    synth = config.synth
    if args.voices is not None:
        synth = replace(synth, voices=args.voices)
    if args.utterances is not None:
        synth = replace(synth, utterances_per_voice=args.utterances)
    out = args.out if args.out is not None else Path(config.paths.data)
    out.mkdir(parents=True, exist_ok=True)
    entries = generate_corpus(synth, out)
    mean_s = float(np.mean([e.dur_s for e in entries if e.dur_s is not None]))
    print(f"{len(entries)} utterances, mean {mean_s:.2f}s -> {out / 'manifest.jsonl'}")
    return out


def cmd_pretrain(args: argparse.Namespace, config: RunConfig) -> Path:
    pre = config.pretrain
    voices = tuple(args.voices.split(",")) if args.voices else pre.voices
    entries = select_voices(read_manifest(args.manifest), voices)
    if not entries:
        raise EmptyDataset(f"no utterances for voices {', '.join(voices)}")
    samples = load_samples(entries)
    paths = {e.id: e.audio for e in entries}

    def audio_of(sample: Sample) -> AudioBuffer:
        return AudioBuffer.from_wav(paths[sample.id])

    training = replace(config.training, batch_size=pre.batch_size, learning_rate=pre.learning_rate, seed=pre.seed)
    epochs = args.epochs if args.epochs is not None else pre.epochs
    params = init_model(config.model, pre.seed)
    params, losses = run_pretraining(params, samples, training, epochs, audio_of, pre.augment)
    out = out_dir(args, config, "pretrain")
    save_checkpoint(params, out / "baseline.epck")
    (out / "pretrain_loss.json").write_text(json.dumps({"epoch_loss": losses}, indent=2), encoding="utf-8")
    print(f"baseline -> {out / 'baseline.epck'} (final loss {losses[-1]:.4f})")
    return out


def _cache(args: argparse.Namespace, config: RunConfig) -> UtteranceCache:
    root = args.cache if args.cache is not None else Path(config.cache.root)
    return UtteranceCache(root, config.training.cache_trigger, config.training.validation_size, config.cache.seed)


def cmd_ingest(args: argparse.Namespace, config: RunConfig) -> Path:
    entries = select_voices(read_manifest(args.manifest), [args.voice] if args.voice else None)
    if args.limit is not None:
        entries = entries[: args.limit]
    cache = _cache(args, config)
    count = len(cache)
    for entry in entries:
        count = cache.add_utterance(entry.audio, entry.text)
    print(f"cache {cache.root}: {count} utterances, ready={cache.ready()} (N={cache.trigger})")
    return cache.root


def cmd_personalize(args: argparse.Namespace, config: RunConfig) -> Path:
    cache = _cache(args, config)
    session = cache.drain()
    out = out_dir(args, config, "personalize")
    train_set = load_samples([u.entry() for u in session.train])
    val_set = load_samples([u.entry() for u in session.validation])

    baseline = load_checkpoint(args.baseline, config.model)
    before = evaluate_set(baseline, val_set, config.training.batch_size)
    (out / "baseline_eval.json").write_text(before.to_json(), encoding="utf-8")

    result = run_personalization(
        args.baseline,
        train_set,
        val_set,
        config.model,
        config.training,
        out / "checkpoints",
        metrics_path=out / "metrics.jsonl",
    )
    shutil.copyfile(result.checkpoint, out / "personalized.epck")
    after = evaluate_set(result.params, val_set, config.training.batch_size)
    (out / "personalized_eval.json").write_text(after.to_json(), encoding="utf-8")

    report = SpeakerReport()
    report.add(SpeakerResult(str(cache.root), before.mean_wer, after.mean_wer, result.epochs, result.mean_epoch_s))
    (out / "speaker_report.json").write_text(report.to_json(), encoding="utf-8")
    if not args.keep_cache:
        cache.confirm(session.token)
    print(f"WER {before.mean_wer:.2f}% -> {after.mean_wer:.2f}% after {result.epochs} epochs (best {result.best_epoch})")
    return out


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> Path:
    entries = select_voices(read_manifest(args.manifest), [args.voice] if args.voice else None)
    params = load_checkpoint(args.checkpoint, config.model)
    report = evaluate_set(params, load_samples(entries), config.training.batch_size)
    out = out_dir(args, config, "eval")
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    print(f"mean WER {report.mean_wer:.2f}%, word-weighted {report.word_weighted_wer:.2f}%")
    return out


def cmd_sweep(args: argparse.Namespace, config: RunConfig) -> Path:
    entries = select_voices(read_manifest(args.manifest), [args.voice])
    val_size = config.training.validation_size
    if len(entries) <= val_size:
        raise EmptyDataset(f"voice {args.voice} has {len(entries)} utterances, need more than {val_size}")
    order = np.random.default_rng(config.sweep.seed).permutation(len(entries))
    samples = load_samples([entries[i] for i in order])
    out = out_dir(args, config, "sweep")
    runner = personalization_runner(args.baseline, samples[val_size:], samples[:val_size], config.model, out / "cells")
    rows = run_sweep(config.sweep, runner, config.training, out, config.model)
    print(f"{len(rows)} sweep rows -> {out / 'sweep.csv'}")
    return out


def cmd_featurize(args: argparse.Namespace, config: RunConfig) -> Path:
    entries = read_manifest(args.manifest)
    items = [(e.id, AudioBuffer.from_wav(e.audio), e.text, e.voice) for e in entries]
    samples = featurize_many(items, args.workers)
    out = out_dir(args, config, "features")
    np.savez_compressed(out / "features.npz", **{s.id: s.features for s in samples})
    print(f"{len(samples)} feature matrices -> {out / 'features.npz'}")
    return out


Handler = Callable[[argparse.Namespace, RunConfig], Path]


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=LOG_LEVELS[args.log_level], format=LOG_FORMAT, force=True)
    handler: Handler = args.handler
    try:
        config = load_config(args)
        out = handler(args, config)
        write_stamp(out, args.command, config, argv)
    except SttError as e:
        _logger.error("%s: %s", type(e).__name__, e)
        print(f"error: {e}", file=sys.stderr)
        return e.exitcode
    except OSError as e:
        _logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        _logger.exception("unexpected failure in %s", args.command)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK

