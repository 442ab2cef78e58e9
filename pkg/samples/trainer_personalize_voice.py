from sttpersonal.dataset import by_voice, load_samples, read_manifest
from sttpersonal.model import ModelConfig
from sttpersonal.trainer import TrainingConfig, run_personalization

samples = load_samples(by_voice(read_manifest("data/manifest.jsonl"))["voice7"])
result = run_personalization(
    "runs/pretrain/baseline.epck", samples[:60], samples[60:], ModelConfig(), TrainingConfig(freeze="FrozenConv"), "runs/voice7"
)
for metrics in result.history:
    print((metrics.epoch, metrics.val_wer, metrics.wall_s))
