"""端末上の個人化学習。

:class:`PersonalTrainer` は Train / Predict / Save / Load / Calculate CTC loss の5つの
シグネチャを持ちます。:func:`run_personalization` はエポックごとの保存と、
1エポックの猶予付きの打ち切り判定を行います。
"""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable, Final, Protocol, Sequence

import numpy as np

from .audio import AudioBuffer, FeatureMatrix, augment_noise, log_mel
from .checkpoint import load_checkpoint, save_checkpoint
from .ctc import CtcItem, ctc_loss_batch, greedy_decode
from .dataset import Sample, batches
from .errors import ConfigError, EmptyDataset, NonFiniteLoss, ShapeMismatch, SilentSignal
from .evaluation import evaluate_set
from .memory import PeakMemorySampler
from .model import FreezeSpec, Gradients, ModelConfig, ParamSet, backward, forward, forward_batch

_logger = logging.getLogger(__name__)

ADAM_BETA1: Final = 0.9
ADAM_BETA2: Final = 0.999
ADAM_EPSILON: Final = 1e-8


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 5
    max_epochs: int = 20
    learning_rate: float = 1e-5
    freeze: FreezeSpec = FreezeSpec()
    seed: int = 0
    grad_clip_norm: float = 5.0
    cache_trigger: int = 60
    validation_size: int = 10

    def __post_init__(self) -> None:
        if isinstance(self.freeze, str):
            object.__setattr__(self, "freeze", FreezeSpec.from_name(self.freeze))
        ConfigError.throw_if(not self.freeze.has_trainable, "every parameter group is frozen, nothing to train")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not self.learning_rate > 0.0:
            raise ConfigError("learning_rate must be > 0")
        if not self.grad_clip_norm > 0.0:
            raise ConfigError("grad_clip_norm must be > 0")
        if self.validation_size < 1:
            raise ConfigError("validation_size must be >= 1")
        if self.cache_trigger <= self.validation_size:
            raise ConfigError("cache_trigger must exceed validation_size so the training split is nonempty")

    def to_dict(self) -> dict[str, object]:
        return {**asdict(self), "freeze": self.freeze.name}


@dataclass
class AdamState:
    """テンソルごとの1次・2次モーメント。最初の更新で0から作ります。"""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()}, self.step)


def adam_update(
    w: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, step: int, lr: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """バイアス補正付きのAdam。``step`` は1始まりです。(w', m', v') を返します。"""
    dtype = w.dtype.type
    m = dtype(ADAM_BETA1) * m + dtype(1.0 - ADAM_BETA1) * g
    v = dtype(ADAM_BETA2) * v + dtype(1.0 - ADAM_BETA2) * g * g
    m_hat = m / dtype(1.0 - ADAM_BETA1**step)
    v_hat = v / dtype(1.0 - ADAM_BETA2**step)
    w = w - dtype(lr) * m_hat / (np.sqrt(v_hat) + dtype(ADAM_EPSILON))
    return w, m, v


def clip_gradients(grads: Gradients, max_norm: float) -> tuple[Gradients, float]:
    """全体ノルムが ``max_norm`` を超えたら一様に縮めます。(勾配, 縮める前のノルム) を返します。"""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    _logger.debug("clipping gradient norm %.4g to %.4g", norm, max_norm)
    return {name: g * g.dtype.type(factor) for name, g in grads.items()}, norm


def apply_gradients(params: ParamSet, grads: Gradients, adam: AdamState, lr: float) -> tuple[ParamSet, AdamState]:
    """勾配のあるテンソルだけを更新した新しい集合と状態を返します。"""
    state = adam.copy()
    state.step += 1
    updates: dict[str, np.ndarray] = {}
    for name, g in grads.items():
        w = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or v is None:
            m = np.zeros_like(w)
            v = np.zeros_like(w)
        g = g.astype(w.dtype, copy=False)
        updates[name], state.m[name], state.v[name] = adam_update(w, g, m, v, state.step, lr)
    return params.replace(updates), state


def _ctc_items(logits: np.ndarray, lengths: np.ndarray, batch: Sequence[Sample]) -> list[CtcItem]:
    return [CtcItem(logits[b], sample.label, int(lengths[b])) for b, sample in enumerate(batch)]


def train_step(
    params: ParamSet, batch: Sequence[Sample], adam: AdamState, config: TrainingConfig
) -> tuple[ParamSet, AdamState, float]:
    """順伝播 → CTC損失 → 逆伝播 → クリップ → Adam。損失が非有限ならパラメーターは変わりません。"""
    if not batch:
        raise EmptyDataset("empty batch")
    if len(batch) > config.batch_size:
        raise ShapeMismatch(f"batch of {len(batch)} exceeds batch_size {config.batch_size}")
    logits, tape = forward_batch(params, [s.features for s in batch])
    if not np.all(np.isfinite(logits)):
        raise NonFiniteLoss("non-finite logits")
    loss, results = ctc_loss_batch(_ctc_items(logits, tape.lengths, batch))
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"batch loss is {loss}")
    # 平均損失の勾配
    dlogits = np.stack([r.dlogits for r in results]) / len(batch)
    grads = backward(params, tape, dlogits, config.freeze)
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NonFiniteLoss("non-finite gradient")
    grads, norm = clip_gradients(grads, config.grad_clip_norm)
    new_params, new_adam = apply_gradients(params, grads, adam, config.learning_rate)
    _logger.debug("step %d: loss %.4f, grad norm %.4g", new_adam.step, loss, norm)
    return new_params, new_adam, loss


def predict(params: ParamSet, features: np.ndarray | FeatureMatrix) -> str:
    logits, _ = forward(params, features)
    return greedy_decode(logits)


def calc_loss(params: ParamSet, batch: Sequence[Sample]) -> float:
    """勾配を求めずにバッチの平均CTC損失を返します。"""
    if not batch:
        raise EmptyDataset("empty batch")
    logits, tape = forward_batch(params, [s.features for s in batch])
    loss, _ = ctc_loss_batch(_ctc_items(logits, tape.lengths, batch))
    return loss


class PersonalTrainer:
    """端末に配備されるモデルの5つのシグネチャ。"""

    __slots__ = ("_params", "_config", "_adam")
    _params: ParamSet
    _config: TrainingConfig
    _adam: AdamState

    def __init__(self, params: ParamSet, config: TrainingConfig = TrainingConfig()) -> None:
        self._params = params
        self._config = config
        self._adam = AdamState()

    @property
    def params(self) -> ParamSet:
        return self._params

    @property
    def config(self) -> TrainingConfig:
        return self._config

    @property
    def adam(self) -> AdamState:
        return self._adam

    def train(self, batch: Sequence[Sample]) -> float:
        self._params, self._adam, loss = train_step(self._params, batch, self._adam, self._config)
        return loss

    def predict(self, features: np.ndarray | FeatureMatrix) -> str:
        return predict(self._params, features)

    def calc_loss(self, batch: Sequence[Sample]) -> float:
        return calc_loss(self._params, batch)

    def save(self, path: str | Path) -> None:
        save_checkpoint(self._params, path)

    def load(self, path: str | Path) -> None:
        """オプティマイザの状態は保存されないので初期化します。"""
        self._params = load_checkpoint(path, self._params.config)
        self._adam = AdamState()

    @classmethod
    def from_checkpoint(cls, path: str | Path, model_config: ModelConfig, config: TrainingConfig) -> "PersonalTrainer":
        return cls(load_checkpoint(path, model_config), config)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    val_wer: float
    wall_s: float
    peak_mem: int

    @property
    def metric(self) -> tuple[float, float]:
        """打ち切り判定の複合指標。WERを優先し、損失で比較します。"""
        return (self.val_wer, self.val_loss)

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))


class StopAction(IntEnum):
    CONTINUE = 0
    GRACE = 1
    STOP = 2


@dataclass(frozen=True)
class StopDecision:
    action: StopAction
    best_epoch: int


@dataclass
class StopState:
    history: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int | None = None
    in_grace: bool = False

    def best_or_none(self) -> EpochMetrics | None:
        if self.best_epoch is None:
            return None
        return next(m for m in self.history if m.epoch == self.best_epoch)


def should_stop(state: StopState, latest: EpochMetrics, max_epochs: int | None = None) -> StopDecision:
    """``latest`` を履歴に加えて次の動作を決めます。

    最良値との比較で、同値も悪化とみなします。猶予中に再び悪化したら最良エポックで停止します。
    """
    if state.history and latest.epoch <= state.history[-1].epoch:
        raise ValueError(f"epoch {latest.epoch} is not after epoch {state.history[-1].epoch}")
    best = state.best_or_none()
    state.history.append(latest)
    if best is None or latest.metric < best.metric:
        state.best_epoch = latest.epoch
        state.in_grace = False
        action = StopAction.CONTINUE
    elif state.in_grace:
        action = StopAction.STOP
    else:
        state.in_grace = True
        action = StopAction.GRACE
    if max_epochs is not None and latest.epoch >= max_epochs:
        action = StopAction.STOP
    assert state.best_epoch is not None
    return StopDecision(action, state.best_epoch)


class ValidationResult(Protocol):
    @property
    def mean_wer(self) -> float: ...

    @property
    def mean_loss(self) -> float | None: ...


Evaluator = Callable[[ParamSet, Sequence[Sample]], ValidationResult]


@dataclass(frozen=True)
class PersonalizationResult:
    params: ParamSet
    checkpoint: Path
    history: tuple[EpochMetrics, ...]
    best_epoch: int

    @property
    def epochs(self) -> int:
        return len(self.history)

    @property
    def mean_epoch_s(self) -> float:
        return float(np.mean([m.wall_s for m in self.history]))


def epoch_checkpoint_path(out_dir: Path, epoch: int) -> Path:
    return out_dir / f"epoch{epoch:03d}.epck"


def run_personalization(
    initial_checkpoint: str | Path,
    train_set: Sequence[Sample],
    val_set: Sequence[Sample],
    model_config: ModelConfig,
    config: TrainingConfig,
    out_dir: str | Path,
    evaluator: Evaluator | None = None,
    on_epoch: Callable[[EpochMetrics, StopDecision], None] | None = None,
    metrics_path: str | Path | None = None,
) -> PersonalizationResult:
    """チェックポイントを読み込んで個人化学習を行い、最良エポックのパラメーターを返します。

    エポックごとにチェックポイントを ``out_dir`` に保存し、``metrics_path`` があれば
    指標をJSON Linesで追記します。エポック時間は学習・検証・保存を含みます。
    """
    if not train_set:
        raise EmptyDataset("training split is empty")
    if not val_set:
        raise EmptyDataset("validation split is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if evaluator is None:

        def evaluator(p: ParamSet, samples: Sequence[Sample]) -> ValidationResult:
            return evaluate_set(p, samples, config.batch_size)

    trainer = PersonalTrainer.from_checkpoint(initial_checkpoint, model_config, config)
    rng = np.random.default_rng(config.seed)
    state = StopState()
    metrics_file = open(metrics_path, "a", encoding="utf-8") if metrics_path is not None else None
    try:
        with PeakMemorySampler() as sampler:
            for epoch in range(1, config.max_epochs + 1):
                sampler.reset()
                start = time.perf_counter()
                losses: list[float] = []
                sizes: list[int] = []
                for batch in batches(train_set, config.batch_size, rng.permutation(len(train_set))):
                    losses.append(trainer.train(batch))
                    sizes.append(len(batch))
                result = evaluator(trainer.params, val_set)
                trainer.save(epoch_checkpoint_path(out_dir, epoch))
                wall_s = time.perf_counter() - start
                metrics = EpochMetrics(
                    epoch=epoch,
                    train_loss=float(np.average(losses, weights=sizes)),
                    val_loss=float(result.mean_loss) if result.mean_loss is not None else math.nan,
                    val_wer=float(result.mean_wer),
                    wall_s=wall_s,
                    peak_mem=sampler.peak_bytes,
                )
                if metrics_file is not None:
                    metrics_file.write(metrics.to_json() + "\n")
                    metrics_file.flush()
                decision = should_stop(state, metrics, config.max_epochs)
                _logger.info(
                    "epoch %d: train loss %.4f, val loss %.4f, val WER %.2f%%, %.2fs, peak %d bytes, %s",
                    epoch,
                    metrics.train_loss,
                    metrics.val_loss,
                    metrics.val_wer,
                    metrics.wall_s,
                    metrics.peak_mem,
                    decision.action.name,
                )
                if on_epoch is not None:
                    on_epoch(metrics, decision)
                if decision.action == StopAction.STOP:
                    break
    finally:
        if metrics_file is not None:
            metrics_file.close()

    assert state.best_epoch is not None
    best_path = epoch_checkpoint_path(out_dir, state.best_epoch)
    params = load_checkpoint(best_path, model_config)
    _logger.info("restored epoch %d of %d from %s", state.best_epoch, len(state.history), best_path)
    return PersonalizationResult(params, best_path, tuple(state.history), state.best_epoch)


@dataclass(frozen=True)
class AugmentConfig:
    fraction: float = 0.4
    snr_db_min: float = 10.0
    snr_db_max: float = 30.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigError("augment fraction must be in [0, 1]")
        if not self.snr_db_min <= self.snr_db_max:
            raise ConfigError("snr_db_min must not exceed snr_db_max")


def _augmented(
    samples: Sequence[Sample],
    audio_of: Callable[[Sample], AudioBuffer],
    augment: AugmentConfig,
    rng: np.random.Generator,
) -> list[Sample]:
    """一部の発話を雑音付きの特徴量に差し替えた新しいリストを返します。"""
    out = list(samples)
    count = int(round(augment.fraction * len(samples)))
    for i in rng.choice(len(samples), size=count, replace=False):
        sample = samples[i]
        snr = float(rng.uniform(augment.snr_db_min, augment.snr_db_max))
        try:
            noisy = augment_noise(audio_of(sample), snr, int(rng.integers(2**31)))
        except SilentSignal:
            _logger.warning("%s: silent audio, augmentation skipped", sample.id)
            continue
        out[i] = Sample(sample.id, log_mel(noisy).frames, sample.text, sample.label, sample.voice)
    return out


def run_pretraining(
    params: ParamSet,
    samples: Sequence[Sample],
    config: TrainingConfig,
    epochs: int,
    audio_of: Callable[[Sample], AudioBuffer] | None = None,
    augment: AugmentConfig = AugmentConfig(),
) -> tuple[ParamSet, list[float]]:
    """ベースラインの学習。``audio_of`` があれば毎エポック一部の発話に雑音を加えます。"""
    if not samples:
        raise EmptyDataset("pretraining set is empty")
    trainer = PersonalTrainer(params, config)
    rng = np.random.default_rng(config.seed)
    history: list[float] = []
    for epoch in range(1, epochs + 1):
        start = time.perf_counter()
        data = samples
        if audio_of is not None and augment.fraction > 0.0:
            data = _augmented(samples, audio_of, augment, rng)
        losses: list[float] = []
        sizes: list[int] = []
        for batch in batches(data, config.batch_size, rng.permutation(len(data))):
            losses.append(trainer.train(batch))
            sizes.append(len(batch))
        history.append(float(np.average(losses, weights=sizes)))
        _logger.info("pretrain epoch %d/%d: loss %.4f, %.2fs", epoch, epochs, history[-1], time.perf_counter() - start)
    return trainer.params, history
