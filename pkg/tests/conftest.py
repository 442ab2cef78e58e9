from pathlib import Path

import numpy as np
import pytest

from sttpersonal.dataset import Sample, load_samples
from sttpersonal.model import ModelConfig
from sttpersonal.synth import SynthConfig, generate_corpus


def make_sample(features: np.ndarray, label: list[int] | np.ndarray, id: str = "s", text: str = "") -> Sample:
    return Sample(id, np.asarray(features), text, np.asarray(label, dtype=np.int64))


@pytest.fixture
def tiny_config() -> ModelConfig:
    """有限差分の確認用。float64で、入力は6次元です。"""
    return ModelConfig(
        input_dim=6,
        conv_channels=(2,),
        conv_kernels=((3, 3),),
        num_blstm_layers=2,
        blstm_units=3,
        fc_units=4,
        alphabet_size=5,
        dtype="float64",
    )


@pytest.fixture
def small_config() -> ModelConfig:
    """80次元の実特徴量で学習できる小さなモデル。"""
    return ModelConfig(conv_channels=(4,), conv_kernels=((3, 3),), num_blstm_layers=1, blstm_units=32, fc_units=32)


@pytest.fixture(scope="session")
def short_corpus(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """7話者×70発話、平均1秒程度の合成コーパス。"""
    out = tmp_path_factory.mktemp("corpus")
    generate_corpus(SynthConfig(voices=7, utterances_per_voice=70, mean_duration_s=1.0, seed=0), out)
    return out


@pytest.fixture(scope="session")
def short_samples(short_corpus: Path) -> dict[str, list[Sample]]:
    from sttpersonal.dataset import by_voice, read_manifest

    return {str(voice): load_samples(entries) for voice, entries in by_voice(read_manifest(short_corpus / "manifest.jsonl")).items()}
